use stas_core::denoiser::{Denoiser, OracleDenoiser, ToyDiT};
use stas_core::sampler::{initial_noise, sample, SampleOptions, SampleResult, SamplerConfig};
use stas_core::steering::SteeringConfig;

use crate::config::{ModelSpec, RunConfig};
use crate::error::Result;

pub fn build(spec: &ModelSpec) -> Result<Box<dyn Denoiser>> {
    Ok(match spec {
        ModelSpec::Toy(c) => Box::new(ToyDiT::new(c.clone())?),
        ModelSpec::Oracle(o) => {
            let target = initial_noise(o.topology.num_tokens(), o.latent_channels, o.target_seed);
            Box::new(OracleDenoiser::new(target, o.topology, o.conditioning_size)?)
        }
    })
}

/// One prompt of a run: its id, noise seed and conditioning vector.
#[derive(Debug, Clone)]
pub struct Prompt {
    pub id: String,
    pub noise_seed: u64,
    pub cond: Vec<f32>,
}

pub fn prompts(config: &RunConfig, seed: u64, cond_size: usize) -> Vec<Prompt> {
    (0..config.run.prompts)
        .map(|i| {
            let noise_seed = seed.wrapping_add(i as u64);
            // Separate stream from the noise so the two never coincide.
            let cond = initial_noise(1, cond_size, noise_seed ^ 0x636f_6e64_0000_0000).into_vec();
            Prompt {
                id: format!("{}-{i}", config.run.prompt_prefix),
                noise_seed,
                cond,
            }
        })
        .collect()
}

pub fn run_prompt(
    model: &dyn Denoiser,
    config: &RunConfig,
    steering: Option<&SteeringConfig>,
    prompt: &Prompt,
    capture_blocks: &[usize],
) -> Result<SampleResult> {
    let sampler = SamplerConfig {
        steps: config.sampler.steps,
        cfg_scale: config.sampler.cfg_scale,
        steering: steering.cloned(),
        seed: prompt.noise_seed,
    };
    let opts = SampleOptions {
        record_trajectory: false,
        capture_blocks: capture_blocks.to_vec(),
        prompt_id: prompt.id.clone(),
    };
    Ok(sample(model, &sampler, &prompt.cond, &opts)?)
}
