use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use stas_core::profiler::{
    classify, classify_batched, DimensionProfile, MAReport, PositionalProfile, PositionalRow, Thresholds,
};
use stas_core::trace::{TraceMeta, TraceReader, TraceRecord};
use stas_core::{ActivationTensor, DimSet, TokenTopology};

use crate::error::{CliError, Result};
use crate::manifest::OutputDir;
use crate::model;
use crate::Ctx;

#[derive(Args, Debug)]
pub struct ProfileArgs {
    /// Trace files; without any, the configured model is sampled and all
    /// blocks are captured
    files: Vec<PathBuf>,
    /// Also compute peak-to-median (holds all snapshots in memory)
    #[arg(long)]
    medians: bool,
    /// Sampling steps for the built-in run
    #[arg(long)]
    steps: Option<usize>,
    /// Prompts for the built-in run
    #[arg(long)]
    prompts: Option<usize>,
}

/// Either trace files on disk or records sampled in-process.
enum Source {
    Files(Vec<PathBuf>),
    Memory(Vec<TraceRecord>),
}

impl Source {
    /// Visit every activation record in order with its origin and index.
    fn for_each(&self, mut f: impl FnMut(&Path, usize, &TraceMeta, &ActivationTensor) -> Result<()>) -> Result<()> {
        match self {
            Source::Files(paths) => {
                for path in paths {
                    let file = File::open(path).map_err(|source| CliError::ReadFile {
                        path: path.clone(),
                        source,
                    })?;
                    let reader = TraceReader::new(BufReader::new(file)).map_err(|source| CliError::Trace {
                        path: path.clone(),
                        source,
                    })?;
                    for (i, rec) in reader.enumerate() {
                        let rec = rec.map_err(|source| CliError::Trace {
                            path: path.clone(),
                            source,
                        })?;
                        if let Some(meta) = rec.activation_meta() {
                            f(path, i, meta, &rec.data)?;
                        }
                    }
                }
            }
            Source::Memory(records) => {
                let origin = Path::new("<sampled>");
                for (i, rec) in records.iter().enumerate() {
                    if let Some(meta) = rec.activation_meta() {
                        f(origin, i, meta, &rec.data)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Metadata every record must agree on.
struct Consistency {
    first: Option<(String, TokenTopology)>,
    hidden: BTreeMap<usize, usize>,
}

impl Consistency {
    fn check(&mut self, path: &Path, record: usize, meta: &TraceMeta) -> Result<TokenTopology> {
        let bad = |reason: String| CliError::InconsistentMeta {
            path: path.to_path_buf(),
            record,
            reason,
        };
        let topo = meta.topology().map_err(|e| bad(e.to_string()))?;
        match &self.first {
            None => self.first = Some((meta.model_id.clone(), topo)),
            Some((model, t)) => {
                if *model != meta.model_id {
                    return Err(bad(format!("model_id {:?} differs from {:?}", meta.model_id, model)));
                }
                if *t != topo {
                    return Err(bad(format!("topology {topo:?} differs from {t:?}")));
                }
            }
        }
        let h = *self.hidden.entry(meta.block).or_insert(meta.hidden_size);
        if h != meta.hidden_size {
            return Err(bad(format!(
                "block {} hidden_size {} differs from {}",
                meta.block, meta.hidden_size, h
            )));
        }
        Ok(topo)
    }
}

#[derive(Debug, Serialize)]
struct StepReport {
    step: usize,
    report: MAReport,
}

#[derive(Debug, Serialize)]
struct BlockReport {
    block: usize,
    overall: MAReport,
    steps: Vec<StepReport>,
}

#[derive(Debug, Serialize)]
struct CsvRow {
    block: usize,
    step: String,
    dim: usize,
    peak: f64,
    peak_to_mean: f64,
    peak_to_median: Option<f64>,
    class: &'static str,
}

#[derive(Debug, Serialize)]
struct PositionalSummary {
    block: usize,
    p: f64,
    dims: Vec<usize>,
    rows: Vec<PositionalRow>,
}

pub fn run(ctx: &mut Ctx, args: &ProfileArgs, out: &mut OutputDir) -> Result<Vec<String>> {
    if args.medians {
        ctx.config.profile.medians = true;
    }
    if let Some(n) = args.steps {
        ctx.config.sampler.steps = n;
    }
    if let Some(p) = args.prompts {
        ctx.config.run.prompts = p;
    }
    let mut files = args.files.clone();
    if files.is_empty() {
        files = ctx.manifest_inputs.iter().map(PathBuf::from).collect();
    }
    let inputs: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
    let source = if files.is_empty() {
        Source::Memory(sample_all_blocks(ctx)?)
    } else {
        Source::Files(files)
    };
    let config = &ctx.config;
    let thresholds = Thresholds {
        ma_threshold: config.profile.ma_threshold,
        sigma_mult: config.profile.sigma_mult,
    };

    // Pass 1: per-(block, step) and per-block dimension statistics.
    let mut per_step: BTreeMap<(usize, usize), DimensionProfile> = BTreeMap::new();
    let mut per_block: BTreeMap<usize, DimensionProfile> = BTreeMap::new();
    let mut kept: BTreeMap<(usize, usize), Vec<ActivationTensor>> = BTreeMap::new();
    let mut check = Consistency {
        first: None,
        hidden: BTreeMap::new(),
    };
    let mut topology = None;
    source.for_each(|path, i, meta, data| {
        topology = Some(check.check(path, i, meta)?);
        let key = (meta.block, meta.step_index);
        per_step
            .entry(key)
            .or_insert_with(|| DimensionProfile::new(meta.hidden_size))
            .accumulate(data)?;
        per_block
            .entry(meta.block)
            .or_insert_with(|| DimensionProfile::new(meta.hidden_size))
            .accumulate(data)?;
        if config.profile.medians {
            kept.entry(key).or_default().push(data.clone());
        }
        Ok(())
    })?;
    let Some(topology) = topology else {
        return Err(CliError::NoRecords(PathBuf::from(inputs.join(","))));
    };

    let classified: Vec<BlockReport> = ctx.pool.install(|| {
        per_block
            .par_iter()
            .map(|(&block, prof)| {
                let overall = if config.profile.medians {
                    let all: Vec<ActivationTensor> = kept
                        .range((block, 0)..(block + 1, 0))
                        .flat_map(|(_, v)| v.iter().cloned())
                        .collect();
                    classify_batched(&all, thresholds)?
                } else {
                    classify(prof, thresholds)?
                };
                let steps = per_step
                    .range((block, 0)..(block + 1, 0))
                    .map(|(&(_, step), p)| {
                        let report = match kept.get(&(block, step)) {
                            Some(snaps) => classify_batched(snaps, thresholds)?,
                            None => classify(p, thresholds)?,
                        };
                        Ok(StepReport { step, report })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(BlockReport { block, overall, steps })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut rows = Vec::new();
    for b in &classified {
        let reports = std::iter::once(("all".to_string(), &b.overall))
            .chain(b.steps.iter().map(|s| (s.step.to_string(), &s.report)));
        for (step, report) in reports {
            rows.extend(report.entries.iter().map(|e| CsvRow {
                block: b.block,
                step: step.clone(),
                dim: e.dim,
                peak: e.peak,
                peak_to_mean: e.peak_to_mean,
                peak_to_median: e.peak_to_median,
                class: e.class.as_str(),
            }));
        }
    }

    // Pass 2: positional magnitudes at each block's tracked dims.
    let mut positional: BTreeMap<usize, PositionalProfile> = BTreeMap::new();
    for b in &classified {
        let dims = match &config.profile.positional_dims {
            Some(d) => DimSet::from_unsorted(d.clone()),
            None => tracked_dims(&b.overall),
        };
        positional.insert(b.block, PositionalProfile::new(topology, config.profile.p, dims)?);
    }
    source.for_each(|_, _, meta, data| {
        positional
            .get_mut(&meta.block)
            .expect("block seen in pass 1")
            .accumulate(meta.step_index, data)?;
        Ok(())
    })?;

    out.write_json("ma_report.json", &classified)?;
    out.write_csv("ma_report.csv", &rows)?;
    let mut summaries = Vec::new();
    for (block, prof) in &positional {
        let prows = prof.rows();
        out.write_csv(&format!("positional_block{block}.csv"), &prows)?;
        summaries.push(PositionalSummary {
            block: *block,
            p: prof.p(),
            dims: prof.dims().as_slice().to_vec(),
            rows: prows,
        });
    }
    out.write_json("positional.json", &summaries)?;
    Ok(inputs)
}

/// MA dims if any, else weak-MA dims, else the single highest-peak dim.
fn tracked_dims(report: &MAReport) -> DimSet {
    let ma = report.ma_dims();
    if !ma.is_empty() {
        return DimSet::from_unsorted(ma);
    }
    let weak = report.weak_ma_dims();
    if !weak.is_empty() {
        return DimSet::from_unsorted(weak);
    }
    DimSet::from_unsorted(report.ranked().first().map(|e| e.dim).into_iter().collect())
}

/// Sample the configured model for every prompt, capturing all blocks.
fn sample_all_blocks(ctx: &Ctx) -> Result<Vec<TraceRecord>> {
    let config = &ctx.config;
    let model = model::build(&config.model)?;
    let topo = model.topology();
    let steering = config.steering.as_ref().map(|s| s.resolve(&topo)).transpose()?;
    let blocks: Vec<usize> = if config.run.capture_blocks.is_empty() {
        (0..model.num_blocks()).collect()
    } else {
        config.run.capture_blocks.clone()
    };
    let prompts = model::prompts(config, ctx.seed, model.cond_size());
    let runs = ctx.pool.install(|| {
        prompts
            .par_iter()
            .map(|p| model::run_prompt(model.as_ref(), config, steering.as_ref(), p, &blocks))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(runs.into_iter().flat_map(|r| r.captured_traces).collect())
}
