//! Run configuration: one JSON document shared by every verb.
//!
//! Every field has a default, so `{}` is a complete config. The resolved
//! config (all defaults filled in) is written into each run manifest, and a
//! manifest is itself accepted wherever a config is.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use stas_core::denoiser::{BiasDecay, PlantedMABias, ToyDiTConfig};
use stas_core::presets::{self, Preset};
use stas_core::steering::SteeringRule;
use stas_core::topology::TokenTopology;
use stas_core::{DimSet, TokenSet};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "STAS_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub sampler: SamplerSection,
    pub steering: Option<SteeringSpec>,
    pub run: RunSection,
    pub profile: ProfileSection,
    pub ablate: AblateGrid,
    pub consistency: ConsistencySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Toy(ToyDiTConfig),
    Oracle(OracleSpec),
}

impl Default for ModelSpec {
    /// Desk-sized toy DiT with one planted MA dimension (5) and one weaker
    /// outlier (17), both at block 2.
    fn default() -> Self {
        let topology = TokenTopology::from_latent(4, 16, 4).expect("valid topology");
        let mut c = ToyDiTConfig::desk(topology);
        c.hidden_size = 128;
        c.planted = vec![
            PlantedMABias {
                block: 2,
                dims: DimSet::from_unsorted(vec![5]),
                first: 2000.0,
                boundary: 1000.0,
                interior: 400.0,
                p: 8.0,
                decay: BiasDecay::ProportionalToSigma,
            },
            PlantedMABias {
                block: 2,
                dims: DimSet::from_unsorted(vec![17]),
                first: 700.0,
                boundary: 600.0,
                interior: 500.0,
                p: 8.0,
                decay: BiasDecay::Constant,
            },
        ];
        ModelSpec::Toy(c)
    }
}

/// Closed-form denoiser flowing to a seeded Gaussian target latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub topology: TokenTopology,
    pub latent_channels: usize,
    pub conditioning_size: usize,
    pub target_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    pub cfg_scale: f32,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 5.0,
        }
    }
}

/// Named token regions of the layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRegion {
    /// F₀ only.
    First,
    /// B(p) only.
    Boundary,
    /// F₀ ∪ B(p).
    Both,
    All,
    None,
}

impl TokenRegion {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenRegion::First => "first",
            TokenRegion::Boundary => "boundary",
            TokenRegion::Both => "both",
            TokenRegion::All => "all",
            TokenRegion::None => "none",
        }
    }

    pub fn resolve(self, topo: &TokenTopology, p: f64) -> Result<TokenSet> {
        Ok(match self {
            TokenRegion::First => topo.first_frame_tokens(),
            TokenRegion::Boundary => topo.boundary_tokens(p)?,
            TokenRegion::Both => topo.target_set(p)?,
            TokenRegion::All => topo.all_tokens(),
            TokenRegion::None => TokenSet::empty(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenChoice {
    Region(TokenRegion),
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringSpec {
    pub dims: Vec<usize>,
    pub tokens: TokenChoice,
    pub p: f64,
    pub rule: SteeringRule,
    /// Steering window K: active for steps `k < steps`.
    pub steps: usize,
    pub layer: usize,
}

impl Default for SteeringSpec {
    fn default() -> Self {
        Self {
            dims: vec![5],
            tokens: TokenChoice::Region(TokenRegion::Both),
            p: 8.0,
            rule: SteeringRule::GlobalMax { alpha: 2.5 },
            steps: 20,
            layer: 2,
        }
    }
}

impl SteeringSpec {
    pub fn resolve(&self, topo: &TokenTopology) -> Result<stas_core::steering::SteeringConfig> {
        let tokens = match &self.tokens {
            TokenChoice::Region(r) => r.resolve(topo, self.p)?,
            TokenChoice::Explicit(v) => TokenSet::from_unsorted(v.clone()),
        };
        Ok(stas_core::steering::SteeringConfig {
            dims: DimSet::from_unsorted(self.dims.clone()),
            tokens,
            rule: self.rule,
            steps: self.steps,
            layer: self.layer,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Number of prompts; prompt `i` uses noise seed `seed + i` and a seeded
    /// Gaussian conditioning vector.
    pub prompts: usize,
    /// Blocks captured into `traces.stas`.
    pub capture_blocks: Vec<usize>,
    pub prompt_prefix: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            prompts: 1,
            capture_blocks: Vec::new(),
            prompt_prefix: "prompt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub ma_threshold: f64,
    pub sigma_mult: f64,
    /// Boundary percentage for the positional profile.
    pub p: f64,
    /// Dims tracked by the positional profile; `null` uses each block's MA
    /// dims, else its weak-MA dims, else its top-peak dim.
    pub positional_dims: Option<Vec<usize>>,
    /// Keep snapshots in memory to also report peak-to-median.
    pub medians: bool,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            ma_threshold: stas_core::profiler::DEFAULT_MA_THRESHOLD,
            sigma_mult: stas_core::profiler::DEFAULT_SIGMA_MULT,
            p: 8.0,
            positional_dims: None,
            medians: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimChoice {
    Ma,
    Weak,
    NonMa,
}

impl DimChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            DimChoice::Ma => "ma",
            DimChoice::Weak => "weak",
            DimChoice::NonMa => "non_ma",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    GlobalMax,
    Scaling,
    Disrupt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateGrid {
    pub dims: Vec<DimChoice>,
    pub tokens: Vec<TokenRegion>,
    pub k: Vec<usize>,
    pub rules: Vec<RuleKind>,
    pub p: Vec<f64>,
    pub alpha: Vec<f32>,
    pub omega: Vec<f32>,
    pub layers: Vec<usize>,
}

impl Default for AblateGrid {
    fn default() -> Self {
        Self {
            dims: vec![DimChoice::Ma, DimChoice::Weak, DimChoice::NonMa],
            tokens: vec![TokenRegion::First, TokenRegion::Boundary, TokenRegion::Both],
            k: vec![20],
            rules: vec![RuleKind::GlobalMax],
            p: vec![8.0],
            alpha: vec![2.5],
            omega: vec![1.0],
            layers: vec![2],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencySection {
    /// Temporal compression ratio when embedding records do not carry one.
    pub r_temp: Option<usize>,
}

/// A config file or a manifest, parsed.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    /// Inputs recorded in a manifest, reused when the command line names none.
    pub manifest_inputs: Vec<String>,
}

pub fn load(path: Option<&Path>) -> Result<Loaded> {
    let Some(path) = path else {
        return Ok(Loaded {
            config: RunConfig::default(),
            manifest_inputs: Vec::new(),
        });
    };
    let text = std::fs::read_to_string(path).map_err(|source| CliError::ReadFile {
        path: path.to_path_buf(),
        source,
    })?;
    parse(&text, &path.display().to_string())
}

pub fn parse(text: &str, origin: &str) -> Result<Loaded> {
    let bad = |reason: String| CliError::Config {
        path: origin.to_string(),
        reason,
    };
    let mut value: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let mut manifest_inputs = Vec::new();
    if let Some(obj) = value.as_object_mut() {
        if obj.contains_key("command") && obj.contains_key("config") {
            if let Some(inputs) = obj.get("inputs") {
                manifest_inputs = serde_json::from_value(inputs.clone()).map_err(|e| bad(format!("inputs: {e}")))?;
            }
            value = obj.remove("config").expect("checked");
        }
    }
    let config = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
    Ok(Loaded {
        config,
        manifest_inputs,
    })
}

/// Seed precedence: flag, then `STAS_SEED`, then the config document, then 0.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, file: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(raw) = env {
        return raw.trim().parse().map_err(|_| CliError::EnvSeed(raw.to_string()));
    }
    Ok(file)
}

pub fn find_preset(name: &str) -> Result<&'static Preset> {
    presets::find(name).ok_or_else(|| CliError::UnknownPreset(name.to_string()))
}

/// Apply a preset's α, p, K and λ. The preset's MA dim and layer index
/// refer to the real backbone and are left to the config.
pub fn apply_preset(config: &mut RunConfig, preset: &Preset) {
    config.sampler.cfg_scale = preset.cfg_scale;
    let s = config.steering.get_or_insert_with(SteeringSpec::default);
    s.rule = SteeringRule::GlobalMax { alpha: preset.alpha };
    s.p = preset.p;
    s.steps = preset.steps;
    config.profile.p = preset.p;
    config.ablate.alpha = vec![preset.alpha];
    config.ablate.p = vec![preset.p];
    config.ablate.k = vec![preset.steps];
}
