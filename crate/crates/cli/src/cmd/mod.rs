pub mod ablate;
pub mod consistency;
pub mod generate;
pub mod info;
pub mod profile;

use stas_core::trace::{self, TraceRecord};

use crate::error::{CliError, Result};

/// Encode a full trace file in memory.
pub(crate) fn encode_trace(records: &[TraceRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    trace::write_records(&mut buf, records).map_err(|source| CliError::Trace {
        path: "<output>".into(),
        source,
    })?;
    Ok(buf)
}
