//! Activation steering operators on a `[tokens × hidden]` layer output.
//!
//! Every operator rewrites only the entries in `S × M` (selected tokens ×
//! selected dimensions) and leaves the rest of the tensor bit-identical.
//!
//! - [`apply_stas`]: global-reference rule. For each `d ∈ M` the reference
//!   `a_d = max_j |x[j, d]|` is taken over *all* tokens of the input, before
//!   any write, and each steered entry becomes `α · a_d · sign(x[i, d])`.
//!   `sign(0) = 0`, so a zero entry stays zero.
//! - [`apply_scaling`]: steered entries are multiplied by `1 + ω`.
//! - [`disrupt`]: steered entries are zeroed.
//! - [`dg_combine`]: detail-guidance extrapolation
//!   `full + ω · (full − degraded)` on two predictions.
//!
//! Each operator comes in a copying flavor and an `_in_place` flavor with the
//! same semantics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index_set::{DimSet, TokenSet};
use crate::tensor::{ActivationTensor, ShapeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SteeringError {
    #[error("dimension {dim} out of range for hidden size {hidden_size}")]
    DimOutOfRange { dim: usize, hidden_size: usize },
    #[error("token {token} out of range for {num_tokens} tokens")]
    TokenOutOfRange { token: usize, num_tokens: usize },
    #[error("non-finite activation at token {token}, dim {dim}")]
    NonFinite { token: usize, dim: usize },
    #[error("alpha must be positive and finite, got {0}")]
    InvalidAlpha(f32),
    #[error("omega must be finite and greater than -1, got {0}")]
    InvalidOmega(f32),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// How steered entries are rewritten.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SteeringRule {
    /// `α · max_j |x[j, d]| · sign(x[i, d])`
    GlobalMax { alpha: f32 },
    /// `(1 + ω) · x[i, d]`
    Scaling { omega: f32 },
    /// `0`
    Disrupt,
}

impl SteeringRule {
    pub fn name(&self) -> &'static str {
        match self {
            SteeringRule::GlobalMax { .. } => "global_max",
            SteeringRule::Scaling { .. } => "scaling",
            SteeringRule::Disrupt => "disrupt",
        }
    }

    pub fn validate(&self) -> Result<(), SteeringError> {
        match *self {
            SteeringRule::GlobalMax { alpha } if !(alpha.is_finite() && alpha > 0.0) => {
                Err(SteeringError::InvalidAlpha(alpha))
            }
            SteeringRule::Scaling { omega } if !(omega.is_finite() && omega > -1.0) => {
                Err(SteeringError::InvalidOmega(omega))
            }
            _ => Ok(()),
        }
    }
}

/// What to steer (`dims`), where (`tokens`), when (the first `steps`
/// denoising steps), how (`rule`) and at which block (`layer`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    pub dims: DimSet,
    pub tokens: TokenSet,
    pub rule: SteeringRule,
    pub steps: usize,
    pub layer: usize,
}

impl SteeringConfig {
    pub fn validate(&self, hidden_size: usize, num_tokens: usize) -> Result<(), SteeringError> {
        self.rule.validate()?;
        check_bounds(&self.dims, &self.tokens, hidden_size, num_tokens)
    }

    /// Whether the gate is open at 0-based step `k`.
    #[inline]
    pub fn active_at(&self, k: usize) -> bool {
        k < self.steps
    }

    /// Number of entries one application rewrites.
    pub fn coverage(&self) -> usize {
        self.dims.len() * self.tokens.len()
    }

    pub fn apply_in_place(&self, acts: &mut ActivationTensor) -> Result<(), SteeringError> {
        apply_rule_in_place(acts, &self.dims, &self.tokens, self.rule)
    }
}

fn check_bounds(dims: &DimSet, tokens: &TokenSet, hidden_size: usize, num_tokens: usize) -> Result<(), SteeringError> {
    if dims.upper_bound() > hidden_size {
        return Err(SteeringError::DimOutOfRange {
            dim: dims.upper_bound() - 1,
            hidden_size,
        });
    }
    if tokens.upper_bound() > num_tokens {
        return Err(SteeringError::TokenOutOfRange {
            token: tokens.upper_bound() - 1,
            num_tokens,
        });
    }
    Ok(())
}

/// Bounds check plus a finiteness scan of the steered columns.
fn check_input(acts: &ActivationTensor, dims: &DimSet, tokens: &TokenSet) -> Result<(), SteeringError> {
    check_bounds(dims, tokens, acts.cols(), acts.rows())?;
    for d in dims.iter() {
        if let Some(token) = acts.column(d).position(|v| !v.is_finite()) {
            return Err(SteeringError::NonFinite { token, dim: d });
        }
    }
    Ok(())
}

/// Dispatch on `rule`.
pub fn apply_rule_in_place(
    acts: &mut ActivationTensor,
    dims: &DimSet,
    tokens: &TokenSet,
    rule: SteeringRule,
) -> Result<(), SteeringError> {
    match rule {
        SteeringRule::GlobalMax { alpha } => apply_stas_in_place(acts, dims, tokens, alpha),
        SteeringRule::Scaling { omega } => apply_scaling_in_place(acts, dims, tokens, omega),
        SteeringRule::Disrupt => disrupt_in_place(acts, dims, tokens),
    }
}

pub fn apply_stas(
    acts: &ActivationTensor,
    dims: &DimSet,
    tokens: &TokenSet,
    alpha: f32,
) -> Result<ActivationTensor, SteeringError> {
    let mut out = acts.clone();
    apply_stas_in_place(&mut out, dims, tokens, alpha)?;
    Ok(out)
}

pub fn apply_stas_in_place(
    acts: &mut ActivationTensor,
    dims: &DimSet,
    tokens: &TokenSet,
    alpha: f32,
) -> Result<(), SteeringError> {
    SteeringRule::GlobalMax { alpha }.validate()?;
    check_input(acts, dims, tokens)?;
    if tokens.is_empty() {
        return Ok(());
    }
    // Reference magnitudes come from the unmodified input.
    let targets: Vec<f32> = dims
        .iter()
        .map(|d| alpha * acts.column(d).fold(0.0f32, |m, v| m.max(v.abs())))
        .collect();
    let cols = acts.cols();
    let data = acts.as_mut_slice();
    for i in tokens.iter() {
        let row = &mut data[i * cols..(i + 1) * cols];
        for (d, &g) in dims.iter().zip(&targets) {
            let x = row[d];
            if x != 0.0 {
                row[d] = g.copysign(x);
            }
        }
    }
    Ok(())
}

pub fn apply_scaling(
    acts: &ActivationTensor,
    dims: &DimSet,
    tokens: &TokenSet,
    omega: f32,
) -> Result<ActivationTensor, SteeringError> {
    let mut out = acts.clone();
    apply_scaling_in_place(&mut out, dims, tokens, omega)?;
    Ok(out)
}

pub fn apply_scaling_in_place(
    acts: &mut ActivationTensor,
    dims: &DimSet,
    tokens: &TokenSet,
    omega: f32,
) -> Result<(), SteeringError> {
    SteeringRule::Scaling { omega }.validate()?;
    check_input(acts, dims, tokens)?;
    let factor = 1.0 + omega;
    let cols = acts.cols();
    let data = acts.as_mut_slice();
    for i in tokens.iter() {
        for d in dims.iter() {
            data[i * cols + d] *= factor;
        }
    }
    Ok(())
}

pub fn disrupt(acts: &ActivationTensor, dims: &DimSet, tokens: &TokenSet) -> Result<ActivationTensor, SteeringError> {
    let mut out = acts.clone();
    disrupt_in_place(&mut out, dims, tokens)?;
    Ok(out)
}

pub fn disrupt_in_place(acts: &mut ActivationTensor, dims: &DimSet, tokens: &TokenSet) -> Result<(), SteeringError> {
    check_input(acts, dims, tokens)?;
    let cols = acts.cols();
    let data = acts.as_mut_slice();
    for i in tokens.iter() {
        for d in dims.iter() {
            data[i * cols + d] = 0.0;
        }
    }
    Ok(())
}

/// `full + ω · (full − degraded)`, elementwise.
pub fn dg_combine(
    full: &ActivationTensor,
    degraded: &ActivationTensor,
    omega: f32,
) -> Result<ActivationTensor, SteeringError> {
    full.ensure_same_shape(degraded)?;
    let data = full
        .as_slice()
        .iter()
        .zip(degraded.as_slice())
        .map(|(&f, &g)| f + omega * (f - g))
        .collect();
    Ok(ActivationTensor::from_vec(full.rows(), full.cols(), data)?)
}
