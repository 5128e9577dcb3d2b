use std::collections::BTreeMap;
use std::time::Instant;

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use stas_core::consistency::{pairwise_similarity, FrameEmbeddingSet};
use stas_core::denoiser::Denoiser;
use stas_core::profiler::{classify, DimClass, DimensionProfile, MAReport, Thresholds};
use stas_core::steering::{SteeringConfig, SteeringRule};
use stas_core::{ActivationTensor, DimSet, Latent, TokenTopology};

use crate::config::{AblateGrid, DimChoice, RuleKind, RunConfig, TokenRegion};
use crate::error::{CliError, Result};
use crate::manifest::OutputDir;
use crate::model::{self, Prompt};
use crate::Ctx;

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Sampling steps per variant
    #[arg(long)]
    steps: Option<usize>,
    /// Prompts per variant
    #[arg(long)]
    prompts: Option<usize>,
}

/// One point of the grid.
#[derive(Debug, Clone)]
struct Variant {
    layer: usize,
    dims: DimChoice,
    tokens: TokenRegion,
    p: f64,
    k: usize,
    rule: SteeringRule,
}

#[derive(Debug, Serialize)]
struct Row {
    variant: String,
    layer: Option<usize>,
    dims: Option<&'static str>,
    dim_list: String,
    tokens: Option<&'static str>,
    p: Option<f64>,
    k: Option<usize>,
    rule: Option<&'static str>,
    alpha: Option<f32>,
    omega: Option<f32>,
    coverage: usize,
    temporal_smoothness: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TimingRow {
    variant: String,
    runtime_ms: f64,
    delta_vs_vanilla_ms: f64,
}

#[derive(Debug, Serialize)]
struct LayerDims {
    layer: usize,
    ma: Vec<usize>,
    weak: Vec<usize>,
    non_ma: Vec<usize>,
    report: MAReport,
}

fn check_axes(grid: &AblateGrid) -> Result<()> {
    let axes: [(&'static str, bool); 8] = [
        ("dims", grid.dims.is_empty()),
        ("tokens", grid.tokens.is_empty()),
        ("k", grid.k.is_empty()),
        ("rules", grid.rules.is_empty()),
        ("p", grid.p.is_empty()),
        (
            "alpha",
            grid.alpha.is_empty() && grid.rules.contains(&RuleKind::GlobalMax),
        ),
        (
            "omega",
            grid.omega.is_empty() && grid.rules.contains(&RuleKind::Scaling),
        ),
        ("layers", grid.layers.is_empty()),
    ];
    match axes.iter().find(|(_, empty)| *empty) {
        Some((name, _)) => Err(CliError::EmptyGrid(name)),
        None => Ok(()),
    }
}

fn expand(grid: &AblateGrid) -> Vec<Variant> {
    let mut rules = Vec::new();
    for r in &grid.rules {
        match r {
            RuleKind::GlobalMax => rules.extend(grid.alpha.iter().map(|&alpha| SteeringRule::GlobalMax { alpha })),
            RuleKind::Scaling => rules.extend(grid.omega.iter().map(|&omega| SteeringRule::Scaling { omega })),
            RuleKind::Disrupt => rules.push(SteeringRule::Disrupt),
        }
    }
    let mut out = Vec::new();
    for &layer in &grid.layers {
        for &dims in &grid.dims {
            for &tokens in &grid.tokens {
                for &p in &grid.p {
                    for &k in &grid.k {
                        for &rule in &rules {
                            out.push(Variant {
                                layer,
                                dims,
                                tokens,
                                p,
                                k,
                                rule,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Mean cosine similarity between consecutive latent frames.
pub fn temporal_smoothness(latent: &Latent, topo: &TokenTopology) -> Result<Option<f64>> {
    if topo.latent_frames() < 2 {
        return Ok(None);
    }
    let frames = ActivationTensor::from_vec(
        topo.latent_frames(),
        topo.tokens_per_frame() * latent.cols(),
        latent.as_slice().to_vec(),
    )
    .expect("latent is frame-major");
    let sims = pairwise_similarity(&FrameEmbeddingSet::new(frames, "latent"))?;
    Ok(Some(sims.iter().sum::<f64>() / sims.len() as f64))
}

struct Outcome {
    smoothness: Option<f64>,
    runtime_ms: f64,
}

fn run_variant(
    model: &dyn Denoiser,
    config: &RunConfig,
    steering: Option<&SteeringConfig>,
    prompts: &[Prompt],
) -> Result<Outcome> {
    let topo = model.topology();
    let started = Instant::now();
    let mut latents = Vec::with_capacity(prompts.len());
    for p in prompts {
        latents.push(model::run_prompt(model, config, steering, p, &[])?.final_latent);
    }
    let runtime_ms = started.elapsed().as_secs_f64() * 1e3;
    let mut total = 0.0;
    let mut any = false;
    for l in &latents {
        if let Some(s) = temporal_smoothness(l, &topo)? {
            total += s;
            any = true;
        }
    }
    Ok(Outcome {
        smoothness: any.then(|| total / latents.len() as f64),
        runtime_ms,
    })
}

/// Classify every grid layer's dims from unsteered captures.
fn classify_layers(
    ctx: &Ctx,
    model: &dyn Denoiser,
    prompts: &[Prompt],
    layers: &[usize],
) -> Result<BTreeMap<usize, LayerDims>> {
    let config = &ctx.config;
    let thresholds = Thresholds {
        ma_threshold: config.profile.ma_threshold,
        sigma_mult: config.profile.sigma_mult,
    };
    let mut profiles: BTreeMap<usize, DimensionProfile> = layers
        .iter()
        .map(|&l| (l, DimensionProfile::new(model.hidden_size())))
        .collect();
    let runs = ctx.pool.install(|| {
        prompts
            .par_iter()
            .map(|p| model::run_prompt(model, config, None, p, layers))
            .collect::<Result<Vec<_>>>()
    })?;
    for rec in runs.iter().flat_map(|r| &r.captured_traces) {
        let meta = rec.activation_meta().expect("sampler emits activations");
        profiles
            .get_mut(&meta.block)
            .expect("captured layer")
            .accumulate(&rec.data)?;
    }
    profiles
        .into_iter()
        .map(|(layer, prof)| {
            let report = classify(&prof, thresholds)?;
            let ma = report.ma_dims();
            let weak = report.weak_ma_dims();
            // As many normal dims as MA dims (at least one), lowest index first.
            let non_ma: Vec<usize> = report
                .dims_of(DimClass::Normal)
                .into_iter()
                .take(ma.len().max(1))
                .collect();
            Ok((
                layer,
                LayerDims {
                    layer,
                    ma,
                    weak,
                    non_ma,
                    report,
                },
            ))
        })
        .collect()
}

pub fn run(ctx: &mut Ctx, args: &AblateArgs, out: &mut OutputDir) -> Result<Vec<String>> {
    if let Some(n) = args.steps {
        ctx.config.sampler.steps = n;
    }
    if let Some(p) = args.prompts {
        ctx.config.run.prompts = p;
    }
    let config = &ctx.config;
    check_axes(&config.ablate)?;
    let model = model::build(&config.model)?;
    let topo = model.topology();
    let prompts = model::prompts(config, ctx.seed, model.cond_size());
    for &layer in &config.ablate.layers {
        if layer >= model.num_blocks() {
            return Err(stas_core::denoiser::ModelError::BlockOutOfRange {
                block: layer,
                num_blocks: model.num_blocks(),
            }
            .into());
        }
    }
    for &k in &config.ablate.k {
        if k > config.sampler.steps {
            return Err(stas_core::sampler::SampleError::SteeringWindow {
                window: k,
                steps: config.sampler.steps,
            }
            .into());
        }
    }

    let dims = classify_layers(ctx, model.as_ref(), &prompts, &config.ablate.layers)?;
    let variants = expand(&config.ablate);
    let resolved = variants
        .iter()
        .map(|v| {
            let d = &dims[&v.layer];
            let list = match v.dims {
                DimChoice::Ma => &d.ma,
                DimChoice::Weak => &d.weak,
                DimChoice::NonMa => &d.non_ma,
            };
            Ok(SteeringConfig {
                dims: DimSet::from_unsorted(list.clone()),
                tokens: v.tokens.resolve(&topo, v.p)?,
                rule: v.rule,
                steps: v.k,
                layer: v.layer,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let vanilla = run_variant(model.as_ref(), config, None, &prompts)?;
    let outcomes = ctx.pool.install(|| {
        resolved
            .par_iter()
            .map(|s| run_variant(model.as_ref(), config, Some(s), &prompts))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut rows = vec![Row {
        variant: "vanilla".into(),
        layer: None,
        dims: None,
        dim_list: String::new(),
        tokens: None,
        p: None,
        k: None,
        rule: None,
        alpha: None,
        omega: None,
        coverage: 0,
        temporal_smoothness: vanilla.smoothness,
    }];
    let mut timing = vec![TimingRow {
        variant: "vanilla".into(),
        runtime_ms: vanilla.runtime_ms,
        delta_vs_vanilla_ms: 0.0,
    }];
    for (i, ((v, s), o)) in variants.iter().zip(&resolved).zip(&outcomes).enumerate() {
        let name = format!("v{i:03}");
        let (alpha, omega) = match v.rule {
            SteeringRule::GlobalMax { alpha } => (Some(alpha), None),
            SteeringRule::Scaling { omega } => (None, Some(omega)),
            SteeringRule::Disrupt => (None, None),
        };
        rows.push(Row {
            variant: name.clone(),
            layer: Some(v.layer),
            dims: Some(v.dims.as_str()),
            dim_list: s.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(";"),
            tokens: Some(v.tokens.as_str()),
            p: Some(v.p),
            k: Some(v.k),
            rule: Some(v.rule.name()),
            alpha,
            omega,
            coverage: s.coverage(),
            temporal_smoothness: o.smoothness,
        });
        timing.push(TimingRow {
            variant: name,
            runtime_ms: o.runtime_ms,
            delta_vs_vanilla_ms: o.runtime_ms - vanilla.runtime_ms,
        });
    }
    out.write_csv("ablate.csv", &rows)?;
    out.write_csv("ablate_timing.csv", &timing)?;
    out.write_json("ablate_dims.json", &dims.values().collect::<Vec<_>>())?;
    Ok(Vec::new())
}
