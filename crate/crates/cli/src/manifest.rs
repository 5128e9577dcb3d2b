use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Written as `manifest.json` next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub seed: u64,
    pub config: &'a RunConfig,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub jobs: usize,
    pub duration_secs: f64,
}

/// Collects output paths as files are written.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|source| CliError::Write {
            path: root.to_path_buf(),
            source,
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|source| CliError::Write { path, source })?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    /// Serialize `rows` as CSV with the header taken from the row type.
    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| CliError::Write {
                path: self.path(name),
                source: std::io::Error::other(e),
            })?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Write {
            path: self.path(name),
            source: std::io::Error::other(e.to_string()),
        })?;
        self.write_bytes(name, &bytes)
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }
}
