//! Desk-scale video DiT.
//!
//! ```text
//! tokens  = patch_in(z) + pos(frame, position) + sigma_proj(sinusoid(σ)) + cond_proj(c)
//! block_b : h += attn(norm1(h));  h += mlp(norm2(h));  h += planted_b(σ);  hook_b(h)
//! velocity = head(norm_out(h))
//! ```
//!
//! Attention is full self-attention over every token of every latent frame.
//! Parameters are drawn from a seeded ChaCha stream and never trained.
//!
//! Checkpoints are trace files of `"params"` records, one per tensor, named
//! `patch_in.weight`, `blocks.{b}.attn.q.bias`, `blocks.{b}.mlp.fc1.weight`,
//! `norm_out.gamma`, ... (see [`ToyParams::tensors`] for the full list and
//! order). Weights are stored `[in × out]`, biases and norm affines `[1 × n]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_common, Captured, Denoiser, DenoiserOutput, ForwardOptions, ModelError};
use crate::index_set::DimSet;
use crate::tensor::{ActivationTensor, Latent};
use crate::topology::{TokenGroup, TokenTopology};
use crate::trace::{ParamMeta, RecordMeta, TraceRecord};

const LN_EPS: f32 = 1e-5;
const SIGMA_FREQS: usize = 16;

/// How planted magnitudes evolve over the noise level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasDecay {
    Constant,
    /// The first-frame and boundary excess over `interior` shrinks linearly
    /// with σ, so the positional contrast fades as sampling progresses.
    ProportionalToSigma,
}

/// Additive bias on selected dimensions of one block's output, graded by
/// token position: first-frame tokens get `first`, boundary tokens
/// (B(p) \ F₀) get `boundary`, interior tokens get `interior`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedMABias {
    pub block: usize,
    pub dims: DimSet,
    pub first: f32,
    pub boundary: f32,
    pub interior: f32,
    pub p: f64,
    pub decay: BiasDecay,
}

impl PlantedMABias {
    fn validate(&self, config: &ToyDiTConfig) -> Result<(), ModelError> {
        if self.block >= config.num_blocks {
            return Err(ModelError::BlockOutOfRange {
                block: self.block,
                num_blocks: config.num_blocks,
            });
        }
        if self.dims.upper_bound() > config.hidden_size {
            return Err(ModelError::Config(format!(
                "planted dim {} out of range for hidden size {}",
                self.dims.upper_bound() - 1,
                config.hidden_size
            )));
        }
        if !(self.first > self.boundary && self.boundary > self.interior && self.interior >= 0.0) {
            return Err(ModelError::Config(format!(
                "planted magnitudes must satisfy first > boundary > interior >= 0, got ({}, {}, {})",
                self.first, self.boundary, self.interior
            )));
        }
        config.topology.token_groups(self.p)?;
        Ok(())
    }

    /// Bias added to tokens of `group` at noise level `sigma`.
    pub fn magnitude(&self, group: TokenGroup, sigma: f32) -> f32 {
        let full = match group {
            TokenGroup::FirstFrame => self.first,
            TokenGroup::Boundary => self.boundary,
            TokenGroup::Interior => self.interior,
        };
        match self.decay {
            BiasDecay::Constant => full,
            BiasDecay::ProportionalToSigma => self.interior + sigma * (full - self.interior),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDiTConfig {
    pub num_blocks: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub topology: TokenTopology,
    pub latent_channels: usize,
    pub conditioning_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub planted: Vec<PlantedMABias>,
}

impl ToyDiTConfig {
    /// 6 blocks, hidden 64, 4 heads, MLP ratio 4, 8 latent channels,
    /// 16-dim conditioning.
    pub fn desk(topology: TokenTopology) -> Self {
        Self {
            num_blocks: 6,
            hidden_size: 64,
            num_heads: 4,
            mlp_ratio: 4,
            topology,
            latent_channels: 8,
            conditioning_size: 16,
            seed: 0,
            planted: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("num_blocks", self.num_blocks),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("latent_channels", self.latent_channels),
            ("conditioning_size", self.conditioning_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        for p in &self.planted {
            p.validate(self)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, gain: f32) -> Self {
        let std = gain / (in_dim as f32).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| std * normal(rng)).collect();
        let bias = (0..out_dim).map(|_| 0.02 * normal(rng)).collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    fn forward(&self, x: &ActivationTensor) -> ActivationTensor {
        debug_assert_eq!(x.cols(), self.in_dim);
        let mut out = ActivationTensor::zeros(x.rows(), self.out_dim);
        for r in 0..x.rows() {
            let dst = out.row_mut(r);
            dst.copy_from_slice(&self.bias);
            for (i, &xi) in x.row(r).iter().enumerate() {
                let w = &self.weight[i * self.out_dim..(i + 1) * self.out_dim];
                for (o, &wv) in dst.iter_mut().zip(w) {
                    *o += xi * wv;
                }
            }
        }
        out
    }

    fn forward_vec(&self, x: &[f32]) -> Vec<f32> {
        let t = ActivationTensor::from_vec(1, x.len(), x.to_vec()).expect("row vector");
        self.forward(&t).into_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerNorm {
    gamma: Vec<f32>,
    beta: Vec<f32>,
}

impl LayerNorm {
    fn init(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        Self {
            gamma: (0..dim).map(|_| 1.0 + 0.1 * normal(rng)).collect(),
            beta: (0..dim).map(|_| 0.05 * normal(rng)).collect(),
        }
    }

    fn forward(&self, x: &ActivationTensor) -> ActivationTensor {
        let mut out = normalize_rows(x);
        for r in 0..out.rows() {
            for ((v, g), b) in out.row_mut(r).iter_mut().zip(&self.gamma).zip(&self.beta) {
                *v = *v * g + b;
            }
        }
        out
    }
}

/// Per-row standardization (zero mean, unit variance), no affine.
pub(crate) fn normalize_rows(x: &ActivationTensor) -> ActivationTensor {
    let mut out = x.clone();
    let n = x.cols() as f32;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f32>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// All learnable tensors of a [`ToyDiT`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams {
    patch_in: Linear,
    sigma_proj: Linear,
    cond_proj: Linear,
    blocks: Vec<Block>,
    norm_out: LayerNorm,
    head: Linear,
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    StandardNormal.sample(rng)
}

impl ToyParams {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: &ToyDiTConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden_size;
        let patch_in = Linear::init(&mut rng, config.latent_channels, h, 1.0);
        let sigma_proj = Linear::init(&mut rng, 2 * SIGMA_FREQS, h, 0.5);
        let cond_proj = Linear::init(&mut rng, config.conditioning_size, h, 0.5);
        let blocks = (0..config.num_blocks)
            .map(|_| Block {
                norm1: LayerNorm::init(&mut rng, h),
                q: Linear::init(&mut rng, h, h, 1.0),
                k: Linear::init(&mut rng, h, h, 1.0),
                v: Linear::init(&mut rng, h, h, 1.0),
                o: Linear::init(&mut rng, h, h, 0.5),
                norm2: LayerNorm::init(&mut rng, h),
                fc1: Linear::init(&mut rng, h, h * config.mlp_ratio, 1.0),
                fc2: Linear::init(&mut rng, h * config.mlp_ratio, h, 0.5),
            })
            .collect();
        let norm_out = LayerNorm::init(&mut rng, h);
        let head = Linear::init(&mut rng, h, config.latent_channels, 1.0);
        Self {
            patch_in,
            sigma_proj,
            cond_proj,
            blocks,
            norm_out,
            head,
        }
    }

    /// `(name, rows, cols, values)` for every tensor, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, usize, usize, &[f32])> {
        type Entry<'a> = (String, usize, usize, &'a [f32]);
        let mut out = Vec::new();
        fn lin<'a>(out: &mut Vec<Entry<'a>>, name: String, l: &'a Linear) {
            out.push((format!("{name}.weight"), l.in_dim, l.out_dim, l.weight.as_slice()));
            out.push((format!("{name}.bias"), 1, l.out_dim, l.bias.as_slice()));
        }
        fn norm<'a>(out: &mut Vec<Entry<'a>>, name: String, n: &'a LayerNorm) {
            out.push((format!("{name}.gamma"), 1, n.gamma.len(), n.gamma.as_slice()));
            out.push((format!("{name}.beta"), 1, n.beta.len(), n.beta.as_slice()));
        }
        lin(&mut out, "patch_in".into(), &self.patch_in);
        lin(&mut out, "sigma_proj".into(), &self.sigma_proj);
        lin(&mut out, "cond_proj".into(), &self.cond_proj);
        for (b, blk) in self.blocks.iter().enumerate() {
            norm(&mut out, format!("blocks.{b}.norm1"), &blk.norm1);
            lin(&mut out, format!("blocks.{b}.attn.q"), &blk.q);
            lin(&mut out, format!("blocks.{b}.attn.k"), &blk.k);
            lin(&mut out, format!("blocks.{b}.attn.v"), &blk.v);
            lin(&mut out, format!("blocks.{b}.attn.o"), &blk.o);
            norm(&mut out, format!("blocks.{b}.norm2"), &blk.norm2);
            lin(&mut out, format!("blocks.{b}.mlp.fc1"), &blk.fc1);
            lin(&mut out, format!("blocks.{b}.mlp.fc2"), &blk.fc2);
        }
        norm(&mut out, "norm_out".into(), &self.norm_out);
        lin(&mut out, "head".into(), &self.head);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out: Vec<&mut Vec<f32>> = Vec::new();
        fn lin<'a>(out: &mut Vec<&'a mut Vec<f32>>, l: &'a mut Linear) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        fn norm<'a>(out: &mut Vec<&'a mut Vec<f32>>, n: &'a mut LayerNorm) {
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        lin(&mut out, &mut self.patch_in);
        lin(&mut out, &mut self.sigma_proj);
        lin(&mut out, &mut self.cond_proj);
        for blk in &mut self.blocks {
            norm(&mut out, &mut blk.norm1);
            lin(&mut out, &mut blk.q);
            lin(&mut out, &mut blk.k);
            lin(&mut out, &mut blk.v);
            lin(&mut out, &mut blk.o);
            norm(&mut out, &mut blk.norm2);
            lin(&mut out, &mut blk.fc1);
            lin(&mut out, &mut blk.fc2);
        }
        norm(&mut out, &mut self.norm_out);
        lin(&mut out, &mut self.head);
        out
    }

    /// FNV-1a over tensor names and raw float bits.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, _, _, values) in self.tensors() {
            eat(name.as_bytes());
            for v in values {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn to_records(&self, model_id: &str) -> Vec<TraceRecord> {
        self.tensors()
            .into_iter()
            .map(|(name, rows, cols, values)| TraceRecord {
                meta: RecordMeta::Params(ParamMeta {
                    model_id: model_id.to_string(),
                    name,
                    rows,
                    cols,
                }),
                data: ActivationTensor::from_vec(rows, cols, values.to_vec()).expect("consistent shapes"),
            })
            .collect()
    }

    /// Rebuild parameters for `config` from checkpoint records. Every tensor
    /// must be present exactly once with the expected shape.
    pub fn from_records(config: &ToyDiTConfig, records: &[TraceRecord]) -> Result<Self, ModelError> {
        let mut params = Self::init(config);
        let layout: Vec<(String, usize, usize)> = params.tensors().into_iter().map(|(n, r, c, _)| (n, r, c)).collect();
        let mut seen = vec![false; layout.len()];
        let mut slots = params.tensors_mut();
        for rec in records {
            let RecordMeta::Params(meta) = &rec.meta else {
                return Err(ModelError::Checkpoint(format!("unexpected {} record", rec.meta.kind())));
            };
            let idx = layout
                .iter()
                .position(|(n, _, _)| *n == meta.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown tensor {}", meta.name)))?;
            let (_, rows, cols) = &layout[idx];
            if rec.data.shape() != (*rows, *cols) {
                return Err(ModelError::Checkpoint(format!(
                    "{}: expected {rows}x{cols}, found {}x{}",
                    meta.name,
                    rec.data.rows(),
                    rec.data.cols()
                )));
            }
            if std::mem::replace(&mut seen[idx], true) {
                return Err(ModelError::Checkpoint(format!("duplicate tensor {}", meta.name)));
            }
            slots[idx].copy_from_slice(rec.data.as_slice());
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(ModelError::Checkpoint(format!("missing tensor {}", layout[i].0)));
        }
        drop(slots);
        Ok(params)
    }
}

/// Seeded, untrained spatiotemporal DiT.
#[derive(Debug, Clone)]
pub struct ToyDiT {
    config: ToyDiTConfig,
    params: ToyParams,
    pos_embed: ActivationTensor,
    planted_groups: Vec<Vec<TokenGroup>>,
}

impl ToyDiT {
    pub fn new(config: ToyDiTConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ToyParams::init(&config);
        Self::with_params(config, params)
    }

    pub fn with_params(config: ToyDiTConfig, params: ToyParams) -> Result<Self, ModelError> {
        config.validate()?;
        if params.blocks.len() != config.num_blocks || params.patch_in.out_dim != config.hidden_size {
            return Err(ModelError::Config("parameters do not match config".into()));
        }
        let pos_embed = positional_embedding(&config.topology, config.hidden_size);
        let planted_groups = config
            .planted
            .iter()
            .map(|p| config.topology.token_groups(p.p))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            config,
            params,
            pos_embed,
            planted_groups,
        })
    }

    pub fn config(&self) -> &ToyDiTConfig {
        &self.config
    }

    pub fn params(&self) -> &ToyParams {
        &self.params
    }

    /// Token embeddings entering block 0.
    pub fn embed(&self, z: &Latent, sigma: f32, cond: &[f32]) -> ActivationTensor {
        let mut h = self.params.patch_in.forward(z);
        let s = self.params.sigma_proj.forward_vec(&sigma_features(sigma));
        let c = self.params.cond_proj.forward_vec(cond);
        for r in 0..h.rows() {
            let pos = self.pos_embed.row(r);
            for (j, v) in h.row_mut(r).iter_mut().enumerate() {
                *v += pos[j] + s[j] + c[j];
            }
        }
        h
    }

    /// Pre-norm attention and MLP sublayers of `block`, with residuals.
    pub fn block_forward(&self, block: usize, h: &mut ActivationTensor) {
        let blk = &self.params.blocks[block];
        let x = blk.norm1.forward(h);
        let attn = self.attention(blk, &x, None);
        let delta = blk.o.forward(&attn);
        add_assign(h, &delta);

        let x = blk.norm2.forward(h);
        let mut hidden = blk.fc1.forward(&x);
        for v in hidden.as_mut_slice() {
            *v = gelu(*v);
        }
        let delta = blk.fc2.forward(&hidden);
        add_assign(h, &delta);
    }

    /// Add every planted bias configured for `block`.
    pub fn add_planted(&self, block: usize, sigma: f32, h: &mut ActivationTensor) {
        for (bias, groups) in self.config.planted.iter().zip(&self.planted_groups) {
            if bias.block != block {
                continue;
            }
            for (t, g) in groups.iter().enumerate() {
                let add = bias.magnitude(*g, sigma);
                let row = h.row_mut(t);
                for d in bias.dims.iter() {
                    row[d] += add;
                }
            }
        }
    }

    /// Final norm and projection back to latent channels.
    pub fn project_out(&self, h: &ActivationTensor) -> Latent {
        self.params.head.forward(&self.params.norm_out.forward(h))
    }

    /// Attention probabilities of every head of `block` for block input `h`,
    /// each `[tokens × tokens]`.
    pub fn attention_weights(&self, block: usize, h: &ActivationTensor) -> Vec<ActivationTensor> {
        let blk = &self.params.blocks[block];
        let x = blk.norm1.forward(h);
        let mut weights = Vec::new();
        self.attention(blk, &x, Some(&mut weights));
        weights
    }

    fn attention(
        &self,
        blk: &Block,
        x: &ActivationTensor,
        mut keep: Option<&mut Vec<ActivationTensor>>,
    ) -> ActivationTensor {
        let q = blk.q.forward(x);
        let k = blk.k.forward(x);
        let v = blk.v.forward(x);
        let n = x.rows();
        let heads = self.config.num_heads;
        let hd = self.config.hidden_size / heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut out = ActivationTensor::zeros(n, self.config.hidden_size);
        let mut scores = vec![0.0f32; n];
        for head in 0..heads {
            let off = head * hd;
            let mut probs = keep.as_ref().map(|_| ActivationTensor::zeros(n, n));
            for i in 0..n {
                let qi = &q.row(i)[off..off + hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k.row(j)[off..off + hd];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                softmax_in_place(&mut scores);
                if let Some(p) = probs.as_mut() {
                    p.row_mut(i).copy_from_slice(&scores);
                }
                let dst = &mut out.row_mut(i)[off..off + hd];
                for (j, &w) in scores.iter().enumerate() {
                    let vj = &v.row(j)[off..off + hd];
                    for (o, &vv) in dst.iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
            if let (Some(k), Some(p)) = (keep.as_mut(), probs) {
                k.push(p);
            }
        }
        out
    }
}

impl Denoiser for ToyDiT {
    fn model_id(&self) -> &str {
        "toy-dit"
    }

    fn topology(&self) -> TokenTopology {
        self.config.topology
    }

    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn cond_size(&self) -> usize {
        self.config.conditioning_size
    }

    fn num_blocks(&self) -> usize {
        self.config.num_blocks
    }

    fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    fn forward(
        &self,
        z: &Latent,
        sigma: f32,
        cond: &[f32],
        opts: &ForwardOptions<'_>,
    ) -> Result<DenoiserOutput, ModelError> {
        check_common(self, z, sigma, cond, opts)?;
        let mut h = self.embed(z, sigma, cond);
        let mut captured = Vec::with_capacity(opts.capture.len());
        for block in 0..self.config.num_blocks {
            self.block_forward(block, &mut h);
            self.add_planted(block, sigma, &mut h);
            if let Some(hook) = opts.hook.filter(|h| h.block == block) {
                (hook.apply)(&mut h).map_err(|source| ModelError::Hook { block, source })?;
            }
            if opts.capture.contains(&block) {
                captured.push(Captured {
                    block,
                    activations: h.clone(),
                });
            }
        }
        Ok(DenoiserOutput {
            velocity: self.project_out(&h),
            captured,
        })
    }
}

fn add_assign(h: &mut ActivationTensor, delta: &ActivationTensor) {
    for (a, b) in h.as_mut_slice().iter_mut().zip(delta.as_slice()) {
        *a += b;
    }
}

fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Sinusoidal features of `1000·σ`.
fn sigma_features(sigma: f32) -> Vec<f32> {
    let t = 1000.0 * sigma;
    let mut out = Vec::with_capacity(2 * SIGMA_FREQS);
    for i in 0..SIGMA_FREQS {
        let freq = (-(10_000f32).ln() * i as f32 / SIGMA_FREQS as f32).exp();
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    out
}

/// Factorized sinusoid: the first half of the hidden dims encodes the latent
/// frame index, the second half the position inside the frame.
fn positional_embedding(topology: &TokenTopology, hidden: usize) -> ActivationTensor {
    let n_f = topology.tokens_per_frame();
    let half = hidden / 2;
    let encode = |pos: f32, j: usize, width: usize| {
        let i = (j / 2) as f32;
        let freq = 1.0 / 10_000f32.powf(2.0 * i / width.max(1) as f32);
        if j.is_multiple_of(2) {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    };
    ActivationTensor::from_fn(topology.num_tokens(), hidden, |t, j| {
        let (frame, pos) = (t / n_f, t % n_f);
        if j < half {
            encode(frame as f32, j, half)
        } else {
            encode(pos as f32, j - half, hidden - half)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ToyDiTConfig {
        let mut c = ToyDiTConfig::desk(TokenTopology::from_latent(3, 8, 4).unwrap());
        c.num_blocks = 3;
        c.hidden_size = 32;
        c.seed = 11;
        c
    }

    fn inputs(model: &ToyDiT, seed: u64) -> (Latent, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, cols) = model.latent_shape();
        let z = Latent::from_fn(rows, cols, |_, _| normal(&mut rng));
        let cond = (0..model.cond_size()).map(|_| normal(&mut rng)).collect();
        (z, cond)
    }

    #[test]
    fn checksums_follow_seed() {
        let a = ToyParams::init(&small_config());
        let b = ToyParams::init(&small_config());
        assert_eq!(a.checksum(), b.checksum());
        let mut other = small_config();
        other.seed = 12;
        assert_ne!(a.checksum(), ToyParams::init(&other).checksum());
    }

    #[test]
    fn desk_default_forward_is_finite() {
        let model = ToyDiT::new(ToyDiTConfig::desk(TokenTopology::from_latent(3, 16, 4).unwrap())).unwrap();
        let (z, cond) = inputs(&model, 1);
        let out = model.forward(&z, 0.7, &cond, &ForwardOptions::default()).unwrap();
        assert_eq!(out.velocity.shape(), z.shape());
        assert!(out.velocity.is_finite());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = ToyDiT::new(small_config()).unwrap();
        let (z, _) = inputs(&model, 2);
        let zero = vec![0.0; model.cond_size()];
        let a = model.forward(&z, 0.5, &zero, &ForwardOptions::default()).unwrap();
        let b = model.forward(&z, 0.5, &zero, &ForwardOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_hook_is_transparent() {
        let model = ToyDiT::new(small_config()).unwrap();
        let (z, cond) = inputs(&model, 3);
        let identity = |_: &mut ActivationTensor| Ok(());
        let hooked = ForwardOptions {
            hook: Some(super::super::LayerHook {
                block: 1,
                apply: &identity,
            }),
            capture: &[],
        };
        let a = model.forward(&z, 0.5, &cond, &ForwardOptions::default()).unwrap();
        let b = model.forward(&z, 0.5, &cond, &hooked).unwrap();
        assert_eq!(a.velocity.as_slice(), b.velocity.as_slice());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let model = ToyDiT::new(small_config()).unwrap();
        let (z, cond) = inputs(&model, 4);
        let h = model.embed(&z, 0.9, &cond);
        let weights = model.attention_weights(0, &h);
        assert_eq!(weights.len(), model.config().num_heads);
        for w in &weights {
            assert_eq!(w.shape(), (24, 24));
            for r in 0..w.rows() {
                let s: f32 = w.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
            }
        }
    }

    #[test]
    fn normalization_is_standardizing() {
        let x = ActivationTensor::from_fn(5, 32, |r, c| (r as f32 + 1.0) * (c as f32).sin() * 7.0 + r as f32);
        let y = normalize_rows(&x);
        for r in 0..5 {
            let row = y.row(r);
            let mean = row.iter().sum::<f32>() / 32.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 32.0;
            assert!(mean.abs() < 1e-4, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn rejects_invalid_config_and_inputs() {
        let mut c = small_config();
        c.num_heads = 5;
        assert!(matches!(ToyDiT::new(c), Err(ModelError::Config(_))));

        let mut c = small_config();
        c.planted.push(PlantedMABias {
            block: 0,
            dims: DimSet::from_unsorted(vec![1]),
            first: 1.0,
            boundary: 2.0,
            interior: 0.0,
            p: 10.0,
            decay: BiasDecay::Constant,
        });
        assert!(matches!(ToyDiT::new(c), Err(ModelError::Config(_))));

        let model = ToyDiT::new(small_config()).unwrap();
        let (z, cond) = inputs(&model, 5);
        assert_eq!(
            model.forward(&z, 0.0, &cond, &ForwardOptions::default()).unwrap_err(),
            ModelError::Sigma(0.0)
        );
        assert!(matches!(
            model.forward(&Latent::zeros(3, 8), 0.5, &cond, &ForwardOptions::default()),
            Err(ModelError::LatentShape { .. })
        ));
        assert!(matches!(
            model.forward(&z, 0.5, &cond[1..], &ForwardOptions::default()),
            Err(ModelError::CondLength { .. })
        ));
        assert!(matches!(
            model.forward(
                &z,
                0.5,
                &cond,
                &ForwardOptions {
                    hook: None,
                    capture: &[3]
                }
            ),
            Err(ModelError::BlockOutOfRange {
                block: 3,
                num_blocks: 3
            })
        ));
    }

    #[test]
    fn planted_bias_orders_groups() {
        let mut c = small_config();
        c.planted.push(PlantedMABias {
            block: 1,
            dims: DimSet::from_unsorted(vec![7]),
            first: 10.0,
            boundary: 5.0,
            interior: 1.0,
            p: 25.0,
            decay: BiasDecay::Constant,
        });
        let model = ToyDiT::new(c).unwrap();
        let (z, cond) = inputs(&model, 6);
        let out = model
            .forward(
                &z,
                0.8,
                &cond,
                &ForwardOptions {
                    hook: None,
                    capture: &[1],
                },
            )
            .unwrap();
        let acts = &out.captured[0].activations;
        let groups = model.config().topology.token_groups(25.0).unwrap();
        let mut sums = [0.0f64; 3];
        let mut counts = [0usize; 3];
        for (t, g) in groups.iter().enumerate() {
            sums[g.index()] += f64::from(acts.get(t, 7).abs());
            counts[g.index()] += 1;
        }
        let means: Vec<f64> = (0..3).map(|i| sums[i] / counts[i] as f64).collect();
        assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = ToyParams::init(&small_config());
        let records = params.to_records("toy-dit");
        let back = ToyParams::from_records(&small_config(), &records).unwrap();
        assert_eq!(back, params);
        assert!(matches!(
            ToyParams::from_records(&small_config(), &records[1..]),
            Err(ModelError::Checkpoint(_))
        ));
        let mut dup = records.clone();
        dup.push(records[0].clone());
        assert!(ToyParams::from_records(&small_config(), &dup).is_err());
    }
}
