//! Frame-to-frame consistency split by chunk structure.
//!
//! Consecutive-frame cosine similarities over any per-frame embedding, with
//! each pair labelled cross-chunk (the two frames decode from different
//! latent frames) or within-chunk.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::ActivationTensor;
use crate::topology::{PairLabel, TokenTopology, TopologyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsistencyError {
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("similarity undefined for pair {pair}: zero-norm embedding at frame {frame}")]
    ZeroVector { pair: usize, frame: usize },
    #[error("similarity series has {found} pairs, topology with {pixel_frames} frames needs {}", pixel_frames - 1)]
    LengthMismatch { found: usize, pixel_frames: usize },
    #[error("embedding set has {found} frames, expected {expected}")]
    FrameCount { expected: usize, found: usize },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Per-frame feature vectors of one video (row `f` = pixel frame `f`).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddingSet {
    pub embeddings: ActivationTensor,
    pub source_label: String,
}

impl FrameEmbeddingSet {
    pub fn new(embeddings: ActivationTensor, source_label: impl Into<String>) -> Self {
        Self {
            embeddings,
            source_label: source_label.into(),
        }
    }

    pub fn frame_count(&self) -> usize {
        self.embeddings.rows()
    }
}

/// Cosine similarity of every consecutive frame pair, in order.
pub fn pairwise_similarity(emb: &FrameEmbeddingSet) -> Result<Vec<f64>, ConsistencyError> {
    let e = &emb.embeddings;
    if e.rows() < 2 {
        return Err(ConsistencyError::TooFewFrames(e.rows()));
    }
    let norms: Vec<f64> = (0..e.rows())
        .map(|f| {
            e.row(f)
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    (0..e.rows() - 1)
        .map(|pair| {
            for frame in [pair, pair + 1] {
                if norms[frame] == 0.0 {
                    return Err(ConsistencyError::ZeroVector { pair, frame });
                }
            }
            let dot: f64 = e
                .row(pair)
                .iter()
                .zip(e.row(pair + 1))
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            Ok((dot / (norms[pair] * norms[pair + 1])).clamp(-1.0, 1.0))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub similarities: Vec<f64>,
    pub labels: Vec<PairLabel>,
    /// `None` when the topology has no pairs of that kind.
    pub cross_chunk_mean: Option<f64>,
    pub within_chunk_mean: Option<f64>,
    pub cross_chunk_pairs: usize,
    pub within_chunk_pairs: usize,
}

impl ConsistencyReport {
    /// Mean over all pairs regardless of label.
    pub fn overall_mean(&self) -> f64 {
        self.similarities.iter().sum::<f64>() / self.similarities.len() as f64
    }
}

pub fn partition_report(sims: &[f64], topo: &TokenTopology) -> Result<ConsistencyReport, ConsistencyError> {
    if sims.len() + 1 != topo.pixel_frames() {
        return Err(ConsistencyError::LengthMismatch {
            found: sims.len(),
            pixel_frames: topo.pixel_frames(),
        });
    }
    let labels = topo.frame_pair_labels();
    let mean_of = |want: PairLabel| {
        let (sum, n) = sims
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == want)
            .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
        ((n > 0).then(|| sum / n as f64), n)
    };
    let (cross_chunk_mean, cross_chunk_pairs) = mean_of(PairLabel::CrossChunk);
    let (within_chunk_mean, within_chunk_pairs) = mean_of(PairLabel::WithinChunk);
    Ok(ConsistencyReport {
        similarities: sims.to_vec(),
        labels,
        cross_chunk_mean,
        within_chunk_mean,
        cross_chunk_pairs,
        within_chunk_pairs,
    })
}

/// Similarity series plus partition for one video.
pub fn analyze(emb: &FrameEmbeddingSet, topo: &TokenTopology) -> Result<ConsistencyReport, ConsistencyError> {
    if emb.frame_count() != topo.pixel_frames() {
        return Err(ConsistencyError::FrameCount {
            expected: topo.pixel_frames(),
            found: emb.frame_count(),
        });
    }
    partition_report(&pairwise_similarity(emb)?, topo)
}

/// Uniform-over-videos average of per-video means. Videos lacking a label
/// set are skipped for that label only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledSummary {
    pub videos: usize,
    pub cross_chunk_mean: Option<f64>,
    pub within_chunk_mean: Option<f64>,
    pub cross_chunk_videos: usize,
    pub within_chunk_videos: usize,
}

pub fn pool_reports<'a>(reports: impl IntoIterator<Item = &'a ConsistencyReport>) -> PooledSummary {
    let (mut videos, mut cs, mut cn, mut ws, mut wn) = (0, 0.0, 0, 0.0, 0);
    for r in reports {
        videos += 1;
        if let Some(m) = r.cross_chunk_mean {
            cs += m;
            cn += 1;
        }
        if let Some(m) = r.within_chunk_mean {
            ws += m;
            wn += 1;
        }
    }
    PooledSummary {
        videos,
        cross_chunk_mean: (cn > 0).then(|| cs / cn as f64),
        within_chunk_mean: (wn > 0).then(|| ws / wn as f64),
        cross_chunk_videos: cn,
        within_chunk_videos: wn,
    }
}
