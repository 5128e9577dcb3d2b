use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use stas_core::trace::{LatentMeta, RecordMeta, TraceRecord};

use crate::config::ModelSpec;
use crate::error::Result;
use crate::manifest::OutputDir;
use crate::model::{self, Prompt};
use crate::Ctx;

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Number of sampling steps N
    #[arg(long)]
    steps: Option<usize>,
    /// CFG scale λ
    #[arg(long)]
    cfg_scale: Option<f32>,
    /// Disable steering even if the config enables it
    #[arg(long)]
    no_steer: bool,
    /// Number of prompts
    #[arg(long)]
    prompts: Option<usize>,
    /// Comma-separated blocks to capture into traces.stas
    #[arg(long, value_delimiter = ',')]
    capture: Option<Vec<usize>>,
}

#[derive(Debug, Serialize)]
struct PromptSummary {
    prompt_id: String,
    noise_seed: u64,
    latent_max_abs: f32,
    /// Oracle model only: distance of the final latent from its target.
    target_max_abs_diff: Option<f32>,
}

pub fn run(ctx: &mut Ctx, args: &GenerateArgs, out: &mut OutputDir) -> Result<Vec<String>> {
    let c = &mut ctx.config;
    if let Some(n) = args.steps {
        c.sampler.steps = n;
    }
    if let Some(l) = args.cfg_scale {
        c.sampler.cfg_scale = l;
    }
    if args.no_steer {
        c.steering = None;
    }
    if let Some(p) = args.prompts {
        c.run.prompts = p;
    }
    if let Some(b) = &args.capture {
        c.run.capture_blocks = b.clone();
    }
    let config = &ctx.config;

    let model = model::build(&config.model)?;
    let topo = model.topology();
    let steering = config.steering.as_ref().map(|s| s.resolve(&topo)).transpose()?;
    let prompts = model::prompts(config, ctx.seed, model.cond_size());

    let results = ctx.pool.install(|| {
        prompts
            .par_iter()
            .map(|p| model::run_prompt(model.as_ref(), config, steering.as_ref(), p, &config.run.capture_blocks))
            .collect::<Result<Vec<_>>>()
    })?;

    let target = match &config.model {
        ModelSpec::Oracle(o) => Some(stas_core::sampler::initial_noise(
            topo.num_tokens(),
            o.latent_channels,
            o.target_seed,
        )),
        ModelSpec::Toy(_) => None,
    };
    let mut latents = Vec::with_capacity(prompts.len());
    let mut traces = Vec::new();
    let mut summary = Vec::with_capacity(prompts.len());
    for (p, r) in prompts.iter().zip(results) {
        summary.push(summarize(p, &r.final_latent, target.as_ref()));
        latents.push(TraceRecord {
            meta: RecordMeta::Latent(LatentMeta {
                model_id: model.model_id().to_string(),
                prompt_id: p.id.clone(),
                seed: p.noise_seed,
                num_tokens: topo.num_tokens(),
                channels: model.latent_channels(),
                latent_frames: topo.latent_frames(),
                tokens_per_frame: topo.tokens_per_frame(),
                r_temp: topo.r_temp(),
            }),
            data: r.final_latent,
        });
        traces.extend(r.captured_traces);
    }
    out.write_bytes("latent.stas", &super::encode_trace(&latents)?)?;
    if !config.run.capture_blocks.is_empty() {
        out.write_bytes("traces.stas", &super::encode_trace(&traces)?)?;
    }
    out.write_json("generate_summary.json", &summary)?;
    Ok(Vec::new())
}

fn summarize(p: &Prompt, latent: &stas_core::Latent, target: Option<&stas_core::Latent>) -> PromptSummary {
    PromptSummary {
        prompt_id: p.id.clone(),
        noise_seed: p.noise_seed,
        latent_max_abs: latent.as_slice().iter().fold(0.0, |m, v| m.max(v.abs())),
        target_max_abs_diff: target.map(|t| latent.max_abs_diff(t)),
    }
}
