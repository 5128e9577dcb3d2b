//! `stas`: profile massive activations, sample with structured activation
//! steering, run ablation grids and chunk-consistency analyses.

mod cmd;
mod config;
mod error;
mod manifest;
mod model;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, SEED_ENV};
use crate::error::{CliError, Result};
use crate::manifest::{OutputDir, RunManifest};

#[derive(Parser, Debug)]
#[command(
    name = "stas",
    version,
    about = "Massive-activation profiling and structured activation steering for video DiTs"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file or a previous run's manifest.json
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "stas-out")]
    out: PathBuf,
    /// Base seed (overrides STAS_SEED and the config file)
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for independent prompts, variants and files
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Named steering preset (see `stas info`)
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-dimension MA classification and positional magnitude profiles
    Profile(cmd::profile::ProfileArgs),
    /// Sample latents, optionally steered and with activation capture
    Generate(cmd::generate::GenerateArgs),
    /// Sweep steering variants and report proxy metrics
    Ablate(cmd::ablate::AblateArgs),
    /// Cross-chunk vs within-chunk frame similarity from embedding files
    Consistency(cmd::consistency::ConsistencyArgs),
    /// Version, presets, default config and trace file summaries
    Info(cmd::info::InfoArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Profile(_) => "profile",
            Command::Generate(_) => "generate",
            Command::Ablate(_) => "ablate",
            Command::Consistency(_) => "consistency",
            Command::Info(_) => "info",
        }
    }
}

/// Resolved state shared by every command.
pub struct Ctx {
    pub config: RunConfig,
    pub seed: u64,
    pub jobs: usize,
    pub pool: rayon::ThreadPool,
    pub manifest_inputs: Vec<String>,
}

fn resolve(common: &Common) -> Result<Ctx> {
    let loaded = config::load(common.config.as_deref())?;
    let mut config = loaded.config;
    if let Some(name) = &common.preset {
        config::apply_preset(&mut config, config::find_preset(name)?);
    }
    let env = std::env::var(SEED_ENV).ok();
    let seed = config::resolve_seed(common.seed, env.as_deref(), config.seed)?;
    config.seed = seed;
    let jobs = common
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::ThreadPool(e.to_string()))?;
    Ok(Ctx {
        config,
        seed,
        jobs,
        pool,
        manifest_inputs: loaded.manifest_inputs,
    })
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let name = cli.command.name();
    let mut ctx = resolve(&cli.common)?;
    if let Command::Info(args) = &cli.command {
        return cmd::info::run(&ctx, args);
    }
    let mut out = OutputDir::create(&cli.common.out)?;
    let inputs = match &cli.command {
        Command::Profile(a) => cmd::profile::run(&mut ctx, a, &mut out)?,
        Command::Generate(a) => cmd::generate::run(&mut ctx, a, &mut out)?,
        Command::Ablate(a) => cmd::ablate::run(&mut ctx, a, &mut out)?,
        Command::Consistency(a) => cmd::consistency::run(&mut ctx, a, &mut out)?,
        Command::Info(_) => unreachable!(),
    };
    let manifest = RunManifest {
        command: name,
        tool_version: env!("CARGO_PKG_VERSION"),
        seed: ctx.seed,
        config: &ctx.config,
        inputs,
        outputs: out.written().to_vec(),
        jobs: ctx.jobs,
        duration_secs: started.elapsed().as_secs_f64(),
    };
    out.write_json("manifest.json", &manifest)
}

fn fail(err: &CliError) -> ExitCode {
    let report = serde_json::to_string(&err.report()).expect("error report serializes");
    eprintln!("{report}");
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(e.render().to_string().trim().to_string())),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
