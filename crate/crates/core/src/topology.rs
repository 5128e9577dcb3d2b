//! Token layout induced by chunk-wise temporal VAE compression.
//!
//! A video of `1 + F` pixel frames is encoded as `1 + F / r_temp` latent
//! frames: pixel frame 0 alone maps to latent frame 0, and every following
//! run of `r_temp` pixel frames maps to one latent frame. Each latent frame is
//! patchified into `tokens_per_frame` tokens, flattened latent-frame-major, so
//! latent frame `l` owns the contiguous token range `[l * n_f, (l + 1) * n_f)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index_set::TokenSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("pixel frame count must be at least 1")]
    NoFrames,
    #[error("{pixel_frames} pixel frames: {} trailing frames not divisible by r_temp={r_temp}", pixel_frames - 1)]
    NotDivisible { pixel_frames: usize, r_temp: usize },
    #[error("temporal compression ratio must be at least 1")]
    ZeroRatio,
    #[error("tokens per frame must be at least 1")]
    ZeroTokens,
    #[error("boundary percentage {0} outside [0, 50]")]
    Percentage(f64),
    #[error("frame pair index {index} out of range for {pixel_frames} pixel frames")]
    PairOutOfRange { index: usize, pixel_frames: usize },
    #[error("inconsistent topology: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "TopologyFields", into = "TopologyFields")]
pub struct TokenTopology {
    latent_frames: usize,
    tokens_per_frame: usize,
    r_temp: usize,
    pixel_frames: usize,
}

/// Serialized form; validated on the way in.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFields {
    latent_frames: usize,
    tokens_per_frame: usize,
    r_temp: usize,
}

impl TryFrom<TopologyFields> for TokenTopology {
    type Error = TopologyError;

    fn try_from(f: TopologyFields) -> Result<Self, Self::Error> {
        TokenTopology::from_latent(f.latent_frames, f.tokens_per_frame, f.r_temp)
    }
}

impl From<TokenTopology> for TopologyFields {
    fn from(t: TokenTopology) -> Self {
        Self {
            latent_frames: t.latent_frames,
            tokens_per_frame: t.tokens_per_frame,
            r_temp: t.r_temp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    CrossChunk,
    WithinChunk,
}

impl PairLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            PairLabel::CrossChunk => "cross_chunk",
            PairLabel::WithinChunk => "within_chunk",
        }
    }
}

/// Token position class used by the positional profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenGroup {
    FirstFrame,
    Boundary,
    Interior,
}

impl TokenGroup {
    pub const ALL: [TokenGroup; 3] = [TokenGroup::FirstFrame, TokenGroup::Boundary, TokenGroup::Interior];

    pub fn index(self) -> usize {
        match self {
            TokenGroup::FirstFrame => 0,
            TokenGroup::Boundary => 1,
            TokenGroup::Interior => 2,
        }
    }
}

/// Number of head (and tail) tokens per latent frame for a boundary
/// percentage: `round_half_up(p / 100 * n_f)`, capped at `n_f`.
pub fn boundary_width(p: f64, tokens_per_frame: usize) -> Result<usize, TopologyError> {
    check_percentage(p)?;
    let k = (p * tokens_per_frame as f64 / 100.0 + 0.5).floor() as usize;
    Ok(k.min(tokens_per_frame))
}

fn check_percentage(p: f64) -> Result<(), TopologyError> {
    if !(0.0..=50.0).contains(&p) {
        return Err(TopologyError::Percentage(p));
    }
    Ok(())
}

impl TokenTopology {
    /// Build the layout for `pixel_frames = 1 + F` decoded frames.
    pub fn build(pixel_frames: usize, r_temp: usize, tokens_per_frame: usize) -> Result<Self, TopologyError> {
        if pixel_frames == 0 {
            return Err(TopologyError::NoFrames);
        }
        if r_temp == 0 {
            return Err(TopologyError::ZeroRatio);
        }
        if tokens_per_frame == 0 {
            return Err(TopologyError::ZeroTokens);
        }
        if !(pixel_frames - 1).is_multiple_of(r_temp) {
            return Err(TopologyError::NotDivisible { pixel_frames, r_temp });
        }
        Ok(Self {
            latent_frames: 1 + (pixel_frames - 1) / r_temp,
            tokens_per_frame,
            r_temp,
            pixel_frames,
        })
    }

    /// Same layout addressed by latent frame count instead of pixel frames.
    pub fn from_latent(latent_frames: usize, tokens_per_frame: usize, r_temp: usize) -> Result<Self, TopologyError> {
        if latent_frames == 0 {
            return Err(TopologyError::NoFrames);
        }
        if r_temp == 0 {
            return Err(TopologyError::ZeroRatio);
        }
        Self::build(1 + (latent_frames - 1) * r_temp, r_temp, tokens_per_frame)
    }

    #[inline]
    pub fn latent_frames(&self) -> usize {
        self.latent_frames
    }

    #[inline]
    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    #[inline]
    pub fn r_temp(&self) -> usize {
        self.r_temp
    }

    #[inline]
    pub fn pixel_frames(&self) -> usize {
        self.pixel_frames
    }

    #[inline]
    pub fn num_tokens(&self) -> usize {
        self.latent_frames * self.tokens_per_frame
    }

    /// Latent frame that pixel frame `f` decodes from.
    pub fn latent_of_pixel(&self, f: usize) -> usize {
        if f == 0 {
            0
        } else {
            (f - 1) / self.r_temp + 1
        }
    }

    /// F₀: all tokens of latent frame 0.
    pub fn first_frame_tokens(&self) -> TokenSet {
        TokenSet::range(0, self.tokens_per_frame)
    }

    /// B(p): head and tail `k` tokens of every latent frame (frame 0 included).
    pub fn boundary_tokens(&self, p: f64) -> Result<TokenSet, TopologyError> {
        let n_f = self.tokens_per_frame;
        let k = boundary_width(p, n_f)?;
        let mut out = Vec::new();
        if k == 0 {
            return Ok(TokenSet::empty());
        }
        for frame in 0..self.latent_frames {
            let start = frame * n_f;
            if 2 * k >= n_f {
                out.extend(start..start + n_f);
            } else {
                out.extend(start..start + k);
                out.extend(start + n_f - k..start + n_f);
            }
        }
        Ok(TokenSet::from_sorted_unchecked(out))
    }

    /// S = F₀ ∪ B(p), the steering target set.
    pub fn target_set(&self, p: f64) -> Result<TokenSet, TopologyError> {
        Ok(self.first_frame_tokens().union(&self.boundary_tokens(p)?))
    }

    /// Every token, for all-token ablations.
    pub fn all_tokens(&self) -> TokenSet {
        TokenSet::range(0, self.num_tokens())
    }

    /// Per-token group label: first frame, boundary (B(p) \ F₀) or interior.
    pub fn token_groups(&self, p: f64) -> Result<Vec<TokenGroup>, TopologyError> {
        let k = boundary_width(p, self.tokens_per_frame)?;
        let n_f = self.tokens_per_frame;
        Ok((0..self.num_tokens())
            .map(|t| {
                let (frame, pos) = (t / n_f, t % n_f);
                if frame == 0 {
                    TokenGroup::FirstFrame
                } else if pos < k || pos >= n_f - k {
                    TokenGroup::Boundary
                } else {
                    TokenGroup::Interior
                }
            })
            .collect())
    }

    /// Label the consecutive pixel-frame pair `(f, f + 1)`.
    pub fn classify_frame_pair(&self, f: usize) -> Result<PairLabel, TopologyError> {
        if f + 1 >= self.pixel_frames {
            return Err(TopologyError::PairOutOfRange {
                index: f,
                pixel_frames: self.pixel_frames,
            });
        }
        Ok(if self.latent_of_pixel(f) != self.latent_of_pixel(f + 1) {
            PairLabel::CrossChunk
        } else {
            PairLabel::WithinChunk
        })
    }

    /// Labels for all `pixel_frames - 1` consecutive pairs.
    pub fn frame_pair_labels(&self) -> Vec<PairLabel> {
        (0..self.pixel_frames.saturating_sub(1))
            .map(|f| self.classify_frame_pair(f).expect("in range"))
            .collect()
    }
}
