//! Massive-activation analysis and structured activation steering for video
//! diffusion transformers.
//!
//! - [`topology`]: token layout of temporally chunked video latents
//!   (first-frame, boundary and target token sets; chunk-boundary frame pairs).
//! - [`trace`]: the binary activation-trace format.
//! - [`profiler`]: streaming per-dimension peak statistics and MA
//!   classification, plus positional magnitude profiles.
//! - [`steering`]: the global-reference steering rule and its ablation
//!   variants, and detail-guidance extrapolation.
//! - [`denoiser`]: a toy spatiotemporal DiT and an analytic flow oracle.
//! - [`sampler`]: Euler flow-matching sampling with CFG and gated steering.
//! - [`consistency`]: cross-chunk vs within-chunk frame similarity.

pub mod consistency;
pub mod denoiser;
pub mod index_set;
pub mod presets;
pub mod profiler;
pub mod sampler;
pub mod steering;
pub mod tensor;
pub mod topology;
pub mod trace;

pub use index_set::{DimSet, IndexSet, TokenSet};
pub use tensor::{ActivationTensor, Latent};
pub use topology::TokenTopology;
