#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use stas_core::trace::{self, Branch, EmbeddingMeta, RecordMeta, TraceMeta, TraceRecord};
use stas_core::ActivationTensor;

pub fn stas() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stas"));
    c.env_remove("STAS_SEED");
    c
}

/// Run and require success, returning stdout.
pub fn ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn stas");
    assert!(
        out.status.success(),
        "stas failed ({:?}): {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Run and require failure, returning the exit code and parsed error JSON.
pub fn err(cmd: &mut Command) -> (i32, Value) {
    let out: Output = cmd.output().expect("spawn stas");
    assert!(!out.status.success(), "expected failure");
    let line = String::from_utf8_lossy(&out.stderr);
    let json = serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {line}"));
    (out.status.code().unwrap(), json)
}

pub fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&fs::read(path.as_ref()).unwrap()).unwrap()
}

pub fn write_json(path: impl AsRef<Path>, v: &Value) -> PathBuf {
    fs::write(path.as_ref(), serde_json::to_vec_pretty(v).unwrap()).unwrap();
    path.as_ref().to_path_buf()
}

pub fn write_trace(path: impl AsRef<Path>, records: &[TraceRecord]) -> PathBuf {
    let mut buf = Vec::new();
    trace::write_records(&mut buf, records).unwrap();
    fs::write(path.as_ref(), buf).unwrap();
    path.as_ref().to_path_buf()
}

pub fn read_trace(path: impl AsRef<Path>) -> Vec<TraceRecord> {
    trace::read_records(fs::File::open(path.as_ref()).unwrap()).unwrap()
}

pub fn activation(
    block: usize,
    step: usize,
    latent_frames: usize,
    tokens_per_frame: usize,
    data: ActivationTensor,
) -> TraceRecord {
    TraceRecord::activation(
        TraceMeta {
            model_id: "fixture".into(),
            block,
            step_index: step,
            sigma: 1.0,
            branch: Branch::Cond,
            prompt_id: "p0".into(),
            num_tokens: data.rows(),
            hidden_size: data.cols(),
            latent_frames,
            tokens_per_frame,
            r_temp: 1,
        },
        data,
    )
}

pub fn embeddings(video_id: &str, r_temp: Option<usize>, data: ActivationTensor) -> TraceRecord {
    TraceRecord {
        meta: RecordMeta::FrameEmbeddings(EmbeddingMeta {
            video_id: video_id.into(),
            source_label: "fixture".into(),
            frame_count: data.rows(),
            dim: data.cols(),
            r_temp,
        }),
        data,
    }
}

/// Every file in `dir` except the manifest, which carries a wall-clock duration.
pub fn outputs_except_manifest(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

/// Closed-form oracle model config.
pub fn oracle_config(steps: usize) -> Value {
    serde_json::json!({
        "model": {
            "kind": "oracle",
            "topology": {"latent_frames": 3, "tokens_per_frame": 8, "r_temp": 4},
            "latent_channels": 4,
            "conditioning_size": 8,
            "target_seed": 99
        },
        "sampler": {"steps": steps, "cfg_scale": 5.0}
    })
}
