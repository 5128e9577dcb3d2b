use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

use stas_core::consistency::ConsistencyError;
use stas_core::denoiser::ModelError;
use stas_core::profiler::ProfileError;
use stas_core::sampler::SampleError;
use stas_core::steering::SteeringError;
use stas_core::topology::TopologyError;
use stas_core::trace::TraceError;

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read {path}: {source}")]
    ReadFile { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {reason}")]
    Config { path: String, reason: String },
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("STAS_SEED={0:?} is not an unsigned integer")]
    EnvSeed(String),
    #[error("{path}: {source}")]
    Trace { path: PathBuf, source: TraceError },
    #[error("{path}: record {record}: {reason}")]
    InconsistentMeta {
        path: PathBuf,
        record: usize,
        reason: String,
    },
    #[error("{path}: record {record} lacks topology metadata (r_temp); pass --r-temp or set consistency.r_temp")]
    MissingTopology { path: PathBuf, record: usize },
    #[error("{0}: contains no usable records")]
    NoRecords(PathBuf),
    #[error("ablation grid axis {0:?} is empty")]
    EmptyGrid(&'static str),
    #[error("duplicate video id {0:?}")]
    DuplicateVideo(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Steering(#[from] SteeringError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Sample(SampleError),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl From<SampleError> for CliError {
    fn from(e: SampleError) -> Self {
        CliError::Sample(e)
    }
}

impl CliError {
    /// Input problems exit with 2; failures after inputs were accepted exit with 3.
    pub fn is_input(&self) -> bool {
        match self {
            CliError::Sample(e) => !matches!(e, SampleError::Model { .. } | SampleError::NonFinite { .. }),
            CliError::Write { .. } | CliError::ThreadPool(_) => false,
            _ => true,
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.is_input() {
            EXIT_INPUT
        } else {
            EXIT_RUNTIME
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::ReadFile { .. } => "read_file",
            CliError::Config { .. } => "config",
            CliError::UnknownPreset(_) => "unknown_preset",
            CliError::EnvSeed(_) => "env_seed",
            CliError::Trace { source, .. } => match source {
                TraceError::BadMagic { .. } => "trace_bad_magic",
                TraceError::UnsupportedVersion(_) => "trace_unsupported_version",
                TraceError::TruncatedHeader | TraceError::Truncated { .. } => "trace_truncated",
                TraceError::NonFinite { .. } => "trace_non_finite",
                TraceError::InvalidMeta { .. } => "trace_invalid_meta",
                TraceError::PayloadLength { .. } => "trace_payload_length",
                TraceError::Io(_) => "trace_io",
            },
            CliError::InconsistentMeta { .. } => "inconsistent_metadata",
            CliError::MissingTopology { .. } => "missing_topology",
            CliError::NoRecords(_) => "no_records",
            CliError::EmptyGrid(_) => "empty_grid",
            CliError::DuplicateVideo(_) => "duplicate_video",
            CliError::Topology(_) => "topology",
            CliError::Model(_) => "model",
            CliError::Steering(_) => "steering",
            CliError::Profile(_) => "profile",
            CliError::Consistency(_) => "consistency",
            CliError::Sample(_) => "sample",
            CliError::Write { .. } => "write",
            CliError::ThreadPool(_) => "thread_pool",
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport {
            error: self.name(),
            kind: if self.is_input() { "input" } else { "runtime" },
            exit_code: self.exit_code(),
            message: self.to_string(),
        }
    }
}

/// The JSON object printed on stderr when a command fails.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: &'static str,
    pub kind: &'static str,
    pub exit_code: i32,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, CliError>;
