use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use stas_core::consistency::{analyze, pool_reports, ConsistencyReport, FrameEmbeddingSet};
use stas_core::trace::{RecordMeta, TraceReader};
use stas_core::TokenTopology;

use crate::error::{CliError, Result};
use crate::manifest::OutputDir;
use crate::Ctx;

#[derive(Args, Debug)]
pub struct ConsistencyArgs {
    /// Trace files holding frame_embeddings records
    files: Vec<PathBuf>,
    /// Temporal compression factor; overrides the config and record metadata
    #[arg(long)]
    r_temp: Option<usize>,
}

struct Video {
    id: String,
    set: FrameEmbeddingSet,
    topo: TokenTopology,
}

#[derive(Debug, Serialize)]
struct PairRow {
    pair_index: usize,
    frame_a: usize,
    frame_b: usize,
    label: &'static str,
    similarity_x100: f64,
}

#[derive(Debug, Serialize)]
struct VideoReport<'a> {
    video_id: &'a str,
    source_label: &'a str,
    frame_count: usize,
    r_temp: usize,
    overall_mean: f64,
    #[serde(flatten)]
    report: &'a ConsistencyReport,
}

/// Keep ids usable as file name components.
fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn load(ctx: &Ctx, files: &[PathBuf], flag: Option<usize>) -> Result<Vec<Video>> {
    let mut videos = Vec::new();
    let mut seen = BTreeSet::new();
    for path in files {
        let file = File::open(path).map_err(|source| CliError::ReadFile {
            path: path.clone(),
            source,
        })?;
        let trace_err = |source| CliError::Trace {
            path: path.clone(),
            source,
        };
        for (i, rec) in TraceReader::new(BufReader::new(file)).map_err(trace_err)?.enumerate() {
            let rec = rec.map_err(trace_err)?;
            let RecordMeta::FrameEmbeddings(meta) = rec.meta else {
                continue;
            };
            let r =
                flag.or(ctx.config.consistency.r_temp)
                    .or(meta.r_temp)
                    .ok_or_else(|| CliError::MissingTopology {
                        path: path.clone(),
                        record: i,
                    })?;
            let id = sanitize(&meta.video_id);
            if !seen.insert(id.clone()) {
                return Err(CliError::DuplicateVideo(meta.video_id));
            }
            let topo = TokenTopology::build(meta.frame_count, r, 1)?;
            videos.push(Video {
                id,
                set: FrameEmbeddingSet::new(rec.data, meta.source_label),
                topo,
            });
        }
    }
    if videos.is_empty() {
        let joined = files
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(",");
        return Err(CliError::NoRecords(PathBuf::from(joined)));
    }
    Ok(videos)
}

pub fn run(ctx: &mut Ctx, args: &ConsistencyArgs, out: &mut OutputDir) -> Result<Vec<String>> {
    let mut files = args.files.clone();
    if files.is_empty() {
        files = ctx.manifest_inputs.iter().map(PathBuf::from).collect();
    }
    if files.is_empty() {
        return Err(CliError::Usage("consistency needs at least one embedding file".into()));
    }
    let inputs = files.iter().map(|p| p.display().to_string()).collect();
    let videos = load(ctx, &files, args.r_temp)?;
    let reports = ctx.pool.install(|| {
        videos
            .par_iter()
            .map(|v| analyze(&v.set, &v.topo).map_err(CliError::from))
            .collect::<Result<Vec<_>>>()
    })?;
    for (v, r) in videos.iter().zip(&reports) {
        let rows: Vec<PairRow> = r
            .similarities
            .iter()
            .zip(&r.labels)
            .enumerate()
            .map(|(f, (&s, l))| PairRow {
                pair_index: f,
                frame_a: f,
                frame_b: f + 1,
                label: l.as_str(),
                similarity_x100: s * 100.0,
            })
            .collect();
        out.write_csv(&format!("consistency_{}.csv", v.id), &rows)?;
        out.write_json(
            &format!("consistency_{}.json", v.id),
            &VideoReport {
                video_id: &v.id,
                source_label: &v.set.source_label,
                frame_count: v.set.frame_count(),
                r_temp: v.topo.r_temp(),
                overall_mean: r.overall_mean(),
                report: r,
            },
        )?;
    }
    out.write_json("pooled.json", &pool_reports(&reports))?;
    Ok(inputs)
}
