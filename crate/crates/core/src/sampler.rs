//! Flow-matching Euler sampler with classifier-free guidance and gated
//! steering.
//!
//! For `k = 0..N` on the linear schedule `σ_k = 1 − k/N`:
//!
//! ```text
//! D⁻ = denoiser(z, σ_k, ∅)        // zero conditioning vector
//! D⁺ = denoiser(z, σ_k, c)
//! D  = D⁻ + λ (D⁺ − D⁻)
//! z  = z + (σ_{k+1} − σ_k) D
//! ```
//!
//! When steering is configured and `k < K`, the steering rule is applied to
//! the output of block `m` inside both branch forwards, so later blocks see
//! the steered activations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{Denoiser, ForwardOptions, LayerHook, ModelError};
use crate::steering::{SteeringConfig, SteeringError};
use crate::tensor::{ActivationTensor, Latent};
use crate::trace::{Branch, TraceMeta, TraceRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("number of sampling steps must be at least 1")]
    ZeroSteps,
    #[error("cfg scale must be finite and non-negative, got {0}")]
    CfgScale(f32),
    #[error("steering window K={window} exceeds the {steps} sampling steps")]
    SteeringWindow { window: usize, steps: usize },
    #[error("steering layer {layer} out of range for a {num_blocks}-block denoiser")]
    SteeringLayer { layer: usize, num_blocks: usize },
    #[error("invalid steering config: {0}")]
    Steering(#[from] SteeringError),
    #[error("denoiser failed at step {step}: {source}")]
    Model { step: usize, source: ModelError },
    #[error("non-finite latent at step {step}")]
    NonFinite { step: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f32,
    #[serde(default)]
    pub steering: Option<SteeringConfig>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate<D: Denoiser + ?Sized>(&self, denoiser: &D) -> Result<(), SampleError> {
        if self.steps == 0 {
            return Err(SampleError::ZeroSteps);
        }
        if !(self.cfg_scale.is_finite() && self.cfg_scale >= 0.0) {
            return Err(SampleError::CfgScale(self.cfg_scale));
        }
        if let Some(s) = &self.steering {
            if s.steps > self.steps {
                return Err(SampleError::SteeringWindow {
                    window: s.steps,
                    steps: self.steps,
                });
            }
            if s.layer >= denoiser.num_blocks() {
                return Err(SampleError::SteeringLayer {
                    layer: s.layer,
                    num_blocks: denoiser.num_blocks(),
                });
            }
            s.validate(denoiser.hidden_size(), denoiser.topology().num_tokens())?;
        }
        Ok(())
    }
}

/// Extra outputs to collect while sampling.
#[derive(Debug, Clone, Default)]
pub struct SampleOptions {
    pub record_trajectory: bool,
    /// Blocks whose outputs are emitted as trace records for every
    /// `(step, branch)`.
    pub capture_blocks: Vec<usize>,
    pub prompt_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub final_latent: Latent,
    /// `N + 1` latents, starting with the initial noise.
    pub trajectory: Option<Vec<Latent>>,
    pub captured_traces: Vec<TraceRecord>,
}

/// `σ_k = 1 − k/N` for `k = 0..=N`.
pub fn sigma_schedule(steps: usize) -> Result<Vec<f32>, SampleError> {
    if steps == 0 {
        return Err(SampleError::ZeroSteps);
    }
    Ok((0..=steps)
        .map(|k| {
            if k == steps {
                0.0
            } else {
                (1.0 - k as f64 / steps as f64) as f32
            }
        })
        .collect())
}

/// Seeded standard Gaussian latent.
pub fn initial_noise(rows: usize, cols: usize, seed: u64) -> Latent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ActivationTensor::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Guided prediction `D⁻ + λ (D⁺ − D⁻)`, evaluated as `(1 − λ) D⁻ + λ D⁺`
/// so that λ = 0 and λ = 1 return the respective branch exactly.
pub fn cfg_combine(uncond: &Latent, cond: &Latent, scale: f32) -> Latent {
    assert_eq!(uncond.shape(), cond.shape());
    let keep = 1.0 - scale;
    let data = uncond
        .as_slice()
        .iter()
        .zip(cond.as_slice())
        .map(|(&u, &c)| keep * u + scale * c)
        .collect();
    Latent::from_vec(uncond.rows(), uncond.cols(), data).expect("same shape")
}

fn euler_step(z: &mut Latent, velocity: &Latent, dt: f32) {
    for (x, v) in z.as_mut_slice().iter_mut().zip(velocity.as_slice()) {
        *x += dt * v;
    }
}

pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    config: &SamplerConfig,
    cond: &[f32],
    opts: &SampleOptions,
) -> Result<SampleResult, SampleError> {
    config.validate(denoiser)?;
    let sigmas = sigma_schedule(config.steps)?;
    let (rows, cols) = denoiser.latent_shape();
    let mut z = initial_noise(rows, cols, config.seed);
    let uncond = vec![0.0f32; denoiser.cond_size()];
    let topology = denoiser.topology();

    let steering = config.steering.as_ref();
    let hook_fn = |acts: &mut ActivationTensor| match steering {
        Some(s) => s.apply_in_place(acts),
        None => Ok(()),
    };

    let mut trajectory = opts.record_trajectory.then(|| vec![z.clone()]);
    let mut traces = Vec::new();

    for step in 0..config.steps {
        let sigma = sigmas[step];
        let hook = steering.filter(|s| s.active_at(step)).map(|s| LayerHook {
            block: s.layer,
            apply: &hook_fn,
        });
        let fwd = ForwardOptions {
            hook,
            capture: &opts.capture_blocks,
        };

        let mut predictions = Vec::with_capacity(2);
        for (branch, c) in [(Branch::Uncond, uncond.as_slice()), (Branch::Cond, cond)] {
            let out = denoiser
                .forward(&z, sigma, c, &fwd)
                .map_err(|source| SampleError::Model { step, source })?;
            for cap in out.captured {
                traces.push(TraceRecord::activation(
                    TraceMeta {
                        model_id: denoiser.model_id().to_string(),
                        block: cap.block,
                        step_index: step,
                        sigma: f64::from(sigma),
                        branch,
                        prompt_id: opts.prompt_id.clone(),
                        num_tokens: cap.activations.rows(),
                        hidden_size: cap.activations.cols(),
                        latent_frames: topology.latent_frames(),
                        tokens_per_frame: topology.tokens_per_frame(),
                        r_temp: topology.r_temp(),
                    },
                    cap.activations,
                ));
            }
            predictions.push(out.velocity);
        }

        let guided = cfg_combine(&predictions[0], &predictions[1], config.cfg_scale);
        euler_step(&mut z, &guided, sigmas[step + 1] - sigma);
        if !z.is_finite() {
            return Err(SampleError::NonFinite { step });
        }
        if let Some(t) = trajectory.as_mut() {
            t.push(z.clone());
        }
    }

    Ok(SampleResult {
        final_latent: z,
        trajectory,
        captured_traces: traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{OracleDenoiser, ToyDiT, ToyDiTConfig};
    use crate::index_set::{DimSet, TokenSet};
    use crate::steering::SteeringRule;
    use crate::topology::TokenTopology;

    #[test]
    fn schedules() {
        assert_eq!(sigma_schedule(1).unwrap(), vec![1.0, 0.0]);
        assert_eq!(sigma_schedule(4).unwrap(), vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(sigma_schedule(0), Err(SampleError::ZeroSteps));
        let s = sigma_schedule(50).unwrap();
        for w in s.windows(2) {
            assert!(w[1] < w[0]);
            assert!(((w[1] - w[0]) + 1.0 / 50.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cfg_collapses_exactly() {
        let u = Latent::from_fn(3, 2, |r, c| r as f32 * 0.3 - c as f32);
        let c = Latent::from_fn(3, 2, |r, c| (r * c) as f32 + 0.7);
        assert_eq!(cfg_combine(&u, &c, 1.0), c);
        assert_eq!(cfg_combine(&u, &c, 0.0), u);
    }

    fn oracle() -> OracleDenoiser {
        let topo = TokenTopology::from_latent(2, 4, 4).unwrap();
        OracleDenoiser::new(initial_noise(8, 3, 99), topo, 2).unwrap()
    }

    #[test]
    fn oracle_converges() {
        let o = oracle();
        for steps in [1, 4, 50] {
            let cfg = SamplerConfig {
                steps,
                cfg_scale: 5.0,
                steering: None,
                seed: 3,
            };
            let r = sample(&o, &cfg, &[1.0, -1.0], &SampleOptions::default()).unwrap();
            assert!(r.final_latent.max_abs_diff(o.target()) < 1e-5);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let o = oracle();
        let mut cfg = SamplerConfig {
            steps: 0,
            cfg_scale: 1.0,
            steering: None,
            seed: 0,
        };
        assert_eq!(
            sample(&o, &cfg, &[0.0; 2], &SampleOptions::default()),
            Err(SampleError::ZeroSteps)
        );
        cfg.steps = 4;
        cfg.steering = Some(SteeringConfig {
            dims: DimSet::from_unsorted(vec![0]),
            tokens: TokenSet::empty(),
            rule: SteeringRule::GlobalMax { alpha: 2.0 },
            steps: 2,
            layer: 0,
        });
        assert_eq!(
            sample(&o, &cfg, &[0.0; 2], &SampleOptions::default()),
            Err(SampleError::SteeringLayer {
                layer: 0,
                num_blocks: 0
            })
        );
        cfg.steering.as_mut().unwrap().steps = 5;
        assert_eq!(
            sample(&o, &cfg, &[0.0; 2], &SampleOptions::default()),
            Err(SampleError::SteeringWindow { window: 5, steps: 4 })
        );
    }

    #[test]
    fn trajectory_and_captures_have_expected_sizes() {
        let mut c = ToyDiTConfig::desk(TokenTopology::from_latent(3, 8, 4).unwrap());
        c.num_blocks = 2;
        c.hidden_size = 16;
        let model = ToyDiT::new(c).unwrap();
        let cfg = SamplerConfig {
            steps: 3,
            cfg_scale: 2.0,
            steering: None,
            seed: 1,
        };
        let opts = SampleOptions {
            record_trajectory: true,
            capture_blocks: vec![1],
            prompt_id: "p".into(),
        };
        let cond = vec![0.5; model.cond_size()];
        let r = sample(&model, &cfg, &cond, &opts).unwrap();
        assert_eq!(r.trajectory.as_ref().unwrap().len(), 4);
        assert_eq!(r.captured_traces.len(), 6);
        let m = r.captured_traces[1].activation_meta().unwrap();
        assert_eq!((m.step_index, m.branch, m.block), (0, Branch::Cond, 1));
        assert!(r.final_latent.is_finite());
    }
}
