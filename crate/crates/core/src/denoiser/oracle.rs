use super::{check_common, Denoiser, DenoiserOutput, ForwardOptions, ModelError};
use crate::tensor::Latent;
use crate::topology::TokenTopology;

/// Exact velocity for the path `z_σ = σ·z₀ + (1 − σ)·target`:
/// `v(z, σ) = (z − target) / σ`.
///
/// Integrating `dz/dσ = v` from σ = 1 to 0 lands exactly on `target`, and an
/// Euler step in σ is exact for this field. Has no blocks, so hooks and
/// captures are rejected.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    target: Latent,
    topology: TokenTopology,
    cond_size: usize,
}

impl OracleDenoiser {
    pub fn new(target: Latent, topology: TokenTopology, cond_size: usize) -> Result<Self, ModelError> {
        if target.rows() != topology.num_tokens() {
            return Err(ModelError::LatentShape {
                expected: (topology.num_tokens(), target.cols()),
                found: target.shape(),
            });
        }
        Ok(Self {
            target,
            topology,
            cond_size,
        })
    }

    pub fn target(&self) -> &Latent {
        &self.target
    }

    pub fn velocity(&self, z: &Latent, sigma: f32) -> Result<Latent, ModelError> {
        if !(sigma > 0.0 && sigma <= 1.0) {
            return Err(ModelError::Sigma(sigma));
        }
        if z.shape() != self.target.shape() {
            return Err(ModelError::LatentShape {
                expected: self.target.shape(),
                found: z.shape(),
            });
        }
        let data = z
            .as_slice()
            .iter()
            .zip(self.target.as_slice())
            .map(|(&x, &t)| (x - t) / sigma)
            .collect();
        Ok(Latent::from_vec(z.rows(), z.cols(), data).expect("same shape"))
    }
}

impl Denoiser for OracleDenoiser {
    fn model_id(&self) -> &str {
        "oracle"
    }

    fn topology(&self) -> TokenTopology {
        self.topology
    }

    fn latent_channels(&self) -> usize {
        self.target.cols()
    }

    fn cond_size(&self) -> usize {
        self.cond_size
    }

    fn num_blocks(&self) -> usize {
        0
    }

    fn hidden_size(&self) -> usize {
        0
    }

    fn forward(
        &self,
        z: &Latent,
        sigma: f32,
        cond: &[f32],
        opts: &ForwardOptions<'_>,
    ) -> Result<DenoiserOutput, ModelError> {
        check_common(self, z, sigma, cond, opts)?;
        Ok(DenoiserOutput {
            velocity: self.velocity(z, sigma)?,
            captured: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle() -> OracleDenoiser {
        let topo = TokenTopology::from_latent(2, 3, 4).unwrap();
        let target = Latent::from_fn(6, 2, |r, c| r as f32 * 0.5 - c as f32);
        OracleDenoiser::new(target, topo, 0).unwrap()
    }

    #[test]
    fn zero_velocity_at_target() {
        let o = oracle();
        let v = o.velocity(&o.target().clone(), 0.3).unwrap();
        assert!(v.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sigma_one_gives_displacement() {
        let o = oracle();
        let z0 = Latent::from_fn(6, 2, |r, c| (r + c) as f32);
        let v = o.velocity(&z0, 1.0).unwrap();
        for i in 0..6 {
            for j in 0..2 {
                assert_eq!(v.get(i, j), z0.get(i, j) - o.target().get(i, j));
            }
        }
    }

    #[test]
    fn singular_sigma_rejected() {
        let o = oracle();
        assert_eq!(o.velocity(&o.target().clone(), 0.0), Err(ModelError::Sigma(0.0)));
        let hook_opts = ForwardOptions {
            hook: None,
            capture: &[0],
        };
        assert!(matches!(
            o.forward(&o.target().clone(), 0.5, &[], &hook_opts),
            Err(ModelError::BlockOutOfRange {
                block: 0,
                num_blocks: 0
            })
        ));
    }
}
