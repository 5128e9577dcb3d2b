use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use stas_core::presets::{Preset, PRESETS};
use stas_core::trace::{RecordMeta, TraceReader};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::Ctx;

#[derive(Args, Debug)]
pub struct InfoArgs {
    /// Trace files to summarize
    files: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
struct FileSummary {
    path: String,
    records: usize,
    kinds: BTreeMap<&'static str, usize>,
    model_ids: BTreeSet<String>,
    blocks: BTreeSet<usize>,
    steps: BTreeSet<usize>,
    prompts: BTreeSet<String>,
    videos: BTreeSet<String>,
}

#[derive(Debug, Serialize)]
struct Info<'a> {
    version: &'static str,
    presets: &'static [Preset],
    config: &'a RunConfig,
    seed: u64,
    files: Vec<FileSummary>,
}

fn summarize(path: &PathBuf) -> Result<FileSummary> {
    let file = File::open(path).map_err(|source| CliError::ReadFile {
        path: path.clone(),
        source,
    })?;
    let trace_err = |source| CliError::Trace {
        path: path.clone(),
        source,
    };
    let mut s = FileSummary {
        path: path.display().to_string(),
        records: 0,
        kinds: BTreeMap::new(),
        model_ids: BTreeSet::new(),
        blocks: BTreeSet::new(),
        steps: BTreeSet::new(),
        prompts: BTreeSet::new(),
        videos: BTreeSet::new(),
    };
    for rec in TraceReader::new(BufReader::new(file)).map_err(trace_err)? {
        let rec = rec.map_err(trace_err)?;
        s.records += 1;
        *s.kinds.entry(rec.meta.kind()).or_default() += 1;
        match rec.meta {
            RecordMeta::Activation(m) => {
                s.blocks.insert(m.block);
                s.steps.insert(m.step_index);
                s.prompts.insert(m.prompt_id);
                s.model_ids.insert(m.model_id);
            }
            RecordMeta::Params(m) => {
                s.model_ids.insert(m.model_id);
            }
            RecordMeta::FrameEmbeddings(m) => {
                s.videos.insert(m.video_id);
            }
            RecordMeta::Latent(m) => {
                s.prompts.insert(m.prompt_id);
                s.model_ids.insert(m.model_id);
            }
        }
    }
    Ok(s)
}

pub fn run(ctx: &Ctx, args: &InfoArgs) -> Result<()> {
    let files = args.files.iter().map(summarize).collect::<Result<Vec<_>>>()?;
    let info = Info {
        version: env!("CARGO_PKG_VERSION"),
        presets: &PRESETS,
        config: &ctx.config,
        seed: ctx.seed,
        files,
    };
    println!("{}", serde_json::to_string_pretty(&info).expect("info serializes"));
    Ok(())
}
