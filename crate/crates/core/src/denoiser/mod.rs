//! Denoisers behind one interface.
//!
//! - [`ToyDiT`]: a small randomly initialized video DiT with full
//!   spatiotemporal self-attention, optional planted massive activations and
//!   a per-block hook point.
//! - [`OracleDenoiser`]: the closed-form velocity field of the linear
//!   interpolation path towards a fixed target latent.

mod oracle;
mod toy;

pub use oracle::OracleDenoiser;
pub use toy::{BiasDecay, PlantedMABias, ToyDiT, ToyDiTConfig, ToyParams};

use thiserror::Error;

use crate::steering::SteeringError;
use crate::tensor::{ActivationTensor, Latent};
use crate::topology::{TokenTopology, TopologyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("latent shape {found:?} does not match expected {expected:?}")]
    LatentShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("noise level {0} outside (0, 1]")]
    Sigma(f32),
    #[error("conditioning vector has length {found}, expected {expected}")]
    CondLength { expected: usize, found: usize },
    #[error("block {block} out of range for a {num_blocks}-block model")]
    BlockOutOfRange { block: usize, num_blocks: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("hook failed at block {block}: {source}")]
    Hook { block: usize, source: SteeringError },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// In-place transform applied to one block's output.
pub type HookFn<'a> = dyn Fn(&mut ActivationTensor) -> Result<(), SteeringError> + Sync + 'a;

#[derive(Clone, Copy)]
pub struct LayerHook<'a> {
    pub block: usize,
    pub apply: &'a HookFn<'a>,
}

#[derive(Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub hook: Option<LayerHook<'a>>,
    /// Blocks whose (post-hook) output is copied into the result.
    pub capture: &'a [usize],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Captured {
    pub block: usize,
    pub activations: ActivationTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub velocity: Latent,
    pub captured: Vec<Captured>,
}

pub trait Denoiser: Sync {
    fn model_id(&self) -> &str;

    fn topology(&self) -> TokenTopology;

    /// Channels per latent token.
    fn latent_channels(&self) -> usize;

    fn cond_size(&self) -> usize;

    /// Number of transformer blocks; hooks and captures index into these.
    fn num_blocks(&self) -> usize;

    /// Width of block outputs (0 for block-less denoisers).
    fn hidden_size(&self) -> usize;

    fn forward(
        &self,
        z: &Latent,
        sigma: f32,
        cond: &[f32],
        opts: &ForwardOptions<'_>,
    ) -> Result<DenoiserOutput, ModelError>;

    fn latent_shape(&self) -> (usize, usize) {
        (self.topology().num_tokens(), self.latent_channels())
    }
}

pub(crate) fn check_common<D: Denoiser + ?Sized>(
    model: &D,
    z: &Latent,
    sigma: f32,
    cond: &[f32],
    opts: &ForwardOptions<'_>,
) -> Result<(), ModelError> {
    if z.shape() != model.latent_shape() {
        return Err(ModelError::LatentShape {
            expected: model.latent_shape(),
            found: z.shape(),
        });
    }
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(ModelError::Sigma(sigma));
    }
    if cond.len() != model.cond_size() {
        return Err(ModelError::CondLength {
            expected: model.cond_size(),
            found: cond.len(),
        });
    }
    let num_blocks = model.num_blocks();
    let blocks = opts
        .hook
        .map(|h| h.block)
        .into_iter()
        .chain(opts.capture.iter().copied());
    for block in blocks {
        if block >= num_blocks {
            return Err(ModelError::BlockOutOfRange { block, num_blocks });
        }
    }
    Ok(())
}
