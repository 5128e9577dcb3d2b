//! Massive-activation profiling.
//!
//! A [`DimensionProfile`] streams snapshots for one `(block, step)` key and
//! keeps, per hidden dimension, the running peak `max_j |x[j, d]|` plus the
//! running sum of `|x[j, d]|`. Memory is `O(hidden_size)` regardless of how
//! many snapshots are folded in, and profiles merge associatively, so shards
//! can be accumulated independently and reduced in any order.
//!
//! [`classify`] turns peaks into an [`MAReport`]:
//!
//! - reference scale = mean over dimensions of the per-dimension peaks;
//! - candidates = dimensions whose peak exceeds `μ + k·σ` of the peak
//!   distribution (`k = 3` by default);
//! - a candidate whose peak-to-mean ratio exceeds the MA threshold (50 by
//!   default) is MA, any other candidate is weak-MA, everything else normal.
//!
//! Peak-to-median needs every value, so it is only reported by
//! [`classify_batched`].
//!
//! [`PositionalProfile`] tracks the mean magnitude at selected dimensions for
//! first-frame, boundary and interior tokens, per denoising step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index_set::DimSet;
use crate::tensor::ActivationTensor;
use crate::topology::{TokenGroup, TokenTopology, TopologyError};

pub const DEFAULT_MA_THRESHOLD: f64 = 50.0;
pub const DEFAULT_SIGMA_MULT: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("hidden size mismatch: profile has {expected}, snapshot has {found}")]
    HiddenSizeMismatch { expected: usize, found: usize },
    #[error("token count mismatch: topology has {expected}, snapshot has {found}")]
    TokenCountMismatch { expected: usize, found: usize },
    #[error("dimension {dim} out of range for hidden size {hidden_size}")]
    DimOutOfRange { dim: usize, hidden_size: usize },
    #[error("profile has no accumulated snapshots")]
    Empty,
    #[error("non-finite activation at flat index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub ma_threshold: f64,
    pub sigma_mult: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            ma_threshold: DEFAULT_MA_THRESHOLD,
            sigma_mult: DEFAULT_SIGMA_MULT,
        }
    }
}

/// Streaming per-dimension peak statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionProfile {
    hidden_size: usize,
    peaks: Vec<f32>,
    abs_sums: Vec<f64>,
    /// Values folded into each dimension (identical across dimensions).
    entries: u64,
    snapshots: u64,
}

impl DimensionProfile {
    pub fn new(hidden_size: usize) -> Self {
        Self {
            hidden_size,
            peaks: vec![0.0; hidden_size],
            abs_sums: vec![0.0; hidden_size],
            entries: 0,
            snapshots: 0,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn peaks(&self) -> &[f32] {
        &self.peaks
    }

    pub fn abs_sums(&self) -> &[f64] {
        &self.abs_sums
    }

    pub fn entries(&self) -> u64 {
        self.entries
    }

    pub fn snapshots(&self) -> u64 {
        self.snapshots
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots == 0
    }

    /// Mean `|x|` of dimension `d` over everything accumulated so far.
    pub fn mean_abs(&self, d: usize) -> Option<f64> {
        (self.entries > 0).then(|| self.abs_sums[d] / self.entries as f64)
    }

    /// Fold one `[tokens × hidden]` snapshot into the profile.
    pub fn accumulate(&mut self, snapshot: &ActivationTensor) -> Result<(), ProfileError> {
        if snapshot.cols() != self.hidden_size {
            return Err(ProfileError::HiddenSizeMismatch {
                expected: self.hidden_size,
                found: snapshot.cols(),
            });
        }
        if let Some(i) = snapshot.first_non_finite() {
            return Err(ProfileError::NonFinite(i));
        }
        for row in 0..snapshot.rows() {
            for ((peak, sum), &v) in self
                .peaks
                .iter_mut()
                .zip(self.abs_sums.iter_mut())
                .zip(snapshot.row(row))
            {
                let a = v.abs();
                if a > *peak {
                    *peak = a;
                }
                *sum += f64::from(a);
            }
        }
        self.entries += snapshot.rows() as u64;
        self.snapshots += 1;
        Ok(())
    }

    /// Combine two profiles of the same key: elementwise max of peaks, sum of
    /// sums and counts.
    pub fn merge(&self, other: &Self) -> Result<Self, ProfileError> {
        let mut out = self.clone();
        out.merge_from(other)?;
        Ok(out)
    }

    pub fn merge_from(&mut self, other: &Self) -> Result<(), ProfileError> {
        if other.hidden_size != self.hidden_size {
            return Err(ProfileError::HiddenSizeMismatch {
                expected: self.hidden_size,
                found: other.hidden_size,
            });
        }
        for (p, &q) in self.peaks.iter_mut().zip(&other.peaks) {
            *p = p.max(q);
        }
        for (s, &t) in self.abs_sums.iter_mut().zip(&other.abs_sums) {
            *s += t;
        }
        self.entries += other.entries;
        self.snapshots += other.snapshots;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DimClass {
    #[serde(rename = "MA")]
    Ma,
    #[serde(rename = "weak_MA")]
    WeakMa,
    #[serde(rename = "normal")]
    Normal,
}

impl DimClass {
    pub fn as_str(self) -> &'static str {
        match self {
            DimClass::Ma => "MA",
            DimClass::WeakMa => "weak_MA",
            DimClass::Normal => "normal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimEntry {
    pub dim: usize,
    pub peak: f64,
    pub mean_abs: f64,
    pub peak_to_mean: f64,
    /// Only available from a batched pass.
    pub peak_to_median: Option<f64>,
    pub class: DimClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MAReport {
    pub entries: Vec<DimEntry>,
    /// Mean over dimensions of per-dimension peaks.
    pub reference_mean: f64,
    pub mu: f64,
    pub sigma: f64,
    pub thresholds: Thresholds,
    pub snapshots: u64,
}

impl MAReport {
    pub fn dims_of(&self, class: DimClass) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.class == class)
            .map(|e| e.dim)
            .collect()
    }

    pub fn ma_dims(&self) -> Vec<usize> {
        self.dims_of(DimClass::Ma)
    }

    pub fn weak_ma_dims(&self) -> Vec<usize> {
        self.dims_of(DimClass::WeakMa)
    }

    /// Entries sorted by descending peak.
    pub fn ranked(&self) -> Vec<&DimEntry> {
        let mut v: Vec<_> = self.entries.iter().collect();
        v.sort_by(|a, b| b.peak.total_cmp(&a.peak).then(a.dim.cmp(&b.dim)));
        v
    }
}

/// Classify a streamed profile. `peak_to_median` is left empty.
pub fn classify(profile: &DimensionProfile, thresholds: Thresholds) -> Result<MAReport, ProfileError> {
    classify_with_medians(profile, None, thresholds)
}

fn classify_with_medians(
    profile: &DimensionProfile,
    medians: Option<&[f64]>,
    thresholds: Thresholds,
) -> Result<MAReport, ProfileError> {
    if profile.is_empty() || profile.hidden_size == 0 {
        return Err(ProfileError::Empty);
    }
    let n = profile.hidden_size as f64;
    let peaks: Vec<f64> = profile.peaks.iter().map(|&p| f64::from(p)).collect();
    let mu = peaks.iter().sum::<f64>() / n;
    let var = peaks.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / n;
    let sigma = var.sqrt();
    let cutoff = mu + thresholds.sigma_mult * sigma;

    let entries = peaks
        .iter()
        .enumerate()
        .map(|(dim, &peak)| {
            // All-zero profiles have no meaningful ratio; report 0.
            let peak_to_mean = if mu > 0.0 { peak / mu } else { 0.0 };
            let class = if peak > cutoff {
                if peak_to_mean > thresholds.ma_threshold {
                    DimClass::Ma
                } else {
                    DimClass::WeakMa
                }
            } else {
                DimClass::Normal
            };
            let peak_to_median = medians.map(|m| if m[dim] > 0.0 { peak / m[dim] } else { f64::INFINITY });
            DimEntry {
                dim,
                peak,
                mean_abs: profile.mean_abs(dim).unwrap_or(0.0),
                peak_to_mean,
                peak_to_median: peak_to_median.filter(|r| r.is_finite()),
                class,
            }
        })
        .collect();

    Ok(MAReport {
        entries,
        reference_mean: mu,
        mu,
        sigma,
        thresholds,
        snapshots: profile.snapshots,
    })
}

/// Classify with every snapshot in hand, which additionally yields the
/// per-dimension peak-to-median ratio (peak over the median of `|x[·, d]|`
/// across all tokens of all snapshots).
pub fn classify_batched(snapshots: &[ActivationTensor], thresholds: Thresholds) -> Result<MAReport, ProfileError> {
    let first = snapshots.first().ok_or(ProfileError::Empty)?;
    let hidden = first.cols();
    let mut profile = DimensionProfile::new(hidden);
    for s in snapshots {
        profile.accumulate(s)?;
    }
    let total_rows: usize = snapshots.iter().map(|s| s.rows()).sum();
    let mut column = Vec::with_capacity(total_rows);
    let medians: Vec<f64> = (0..hidden)
        .map(|d| {
            column.clear();
            column.extend(snapshots.iter().flat_map(|s| s.column(d)).map(f32::abs));
            median(&mut column)
        })
        .collect();
    classify_with_medians(&profile, Some(&medians), thresholds)
}

fn median(values: &mut [f32]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_unstable_by(f32::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        f64::from(values[n / 2])
    } else {
        (f64::from(values[n / 2 - 1]) + f64::from(values[n / 2])) / 2.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupAccumulator {
    pub sum: f64,
    pub count: u64,
}

impl GroupAccumulator {
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// One row of the positional report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionalRow {
    pub step: usize,
    pub first_mean: Option<f64>,
    pub boundary_mean: Option<f64>,
    pub interior_mean: Option<f64>,
    pub ratio: Option<f64>,
}

/// Per-step mean `|x|` at a fixed set of dimensions, split by token position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalProfile {
    dims: DimSet,
    p: f64,
    topology: TokenTopology,
    groups: Vec<TokenGroup>,
    steps: BTreeMap<usize, [GroupAccumulator; 3]>,
}

impl PositionalProfile {
    pub fn new(topology: TokenTopology, p: f64, dims: DimSet) -> Result<Self, ProfileError> {
        let groups = topology.token_groups(p)?;
        Ok(Self {
            dims,
            p,
            topology,
            groups,
            steps: BTreeMap::new(),
        })
    }

    pub fn dims(&self) -> &DimSet {
        &self.dims
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn topology(&self) -> &TokenTopology {
        &self.topology
    }

    pub fn accumulate(&mut self, step_index: usize, snapshot: &ActivationTensor) -> Result<(), ProfileError> {
        if snapshot.rows() != self.topology.num_tokens() {
            return Err(ProfileError::TokenCountMismatch {
                expected: self.topology.num_tokens(),
                found: snapshot.rows(),
            });
        }
        if let Some(dim) = self.dims.iter().find(|&d| d >= snapshot.cols()) {
            return Err(ProfileError::DimOutOfRange {
                dim,
                hidden_size: snapshot.cols(),
            });
        }
        let mut acc = [GroupAccumulator::default(); 3];
        for (token, group) in self.groups.iter().enumerate() {
            let row = snapshot.row(token);
            let slot = &mut acc[group.index()];
            for d in self.dims.iter() {
                let v = row[d];
                if !v.is_finite() {
                    return Err(ProfileError::NonFinite(token * snapshot.cols() + d));
                }
                slot.sum += f64::from(v.abs());
                slot.count += 1;
            }
        }
        let entry = self.steps.entry(step_index).or_default();
        for (dst, src) in entry.iter_mut().zip(acc) {
            dst.sum += src.sum;
            dst.count += src.count;
        }
        Ok(())
    }

    pub fn merge_from(&mut self, other: &Self) -> Result<(), ProfileError> {
        if other.topology != self.topology || other.dims != self.dims || other.p != self.p {
            return Err(ProfileError::Topology(TopologyError::Inconsistent(
                "positional profiles differ in topology, dims or p".into(),
            )));
        }
        for (step, acc) in &other.steps {
            let entry = self.steps.entry(*step).or_default();
            for (dst, src) in entry.iter_mut().zip(acc) {
                dst.sum += src.sum;
                dst.count += src.count;
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.keys().copied()
    }

    pub fn group_mean(&self, step: usize, group: TokenGroup) -> Option<f64> {
        self.steps.get(&step).and_then(|acc| acc[group.index()].mean())
    }

    /// Boundary mean over interior mean per step, in step order. Steps
    /// lacking either group, or with a zero interior mean, report `None`.
    pub fn boundary_interior_ratio(&self) -> Vec<(usize, Option<f64>)> {
        self.rows().into_iter().map(|r| (r.step, r.ratio)).collect()
    }

    pub fn rows(&self) -> Vec<PositionalRow> {
        self.steps
            .iter()
            .map(|(&step, acc)| {
                let first_mean = acc[0].mean();
                let boundary_mean = acc[1].mean();
                let interior_mean = acc[2].mean();
                let ratio = match (boundary_mean, interior_mean) {
                    (Some(b), Some(i)) if i > 0.0 => Some(b / i),
                    _ => None,
                };
                PositionalRow {
                    step,
                    first_mean,
                    boundary_mean,
                    interior_mean,
                    ratio,
                }
            })
            .collect()
    }
}
