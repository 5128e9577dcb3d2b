//! Activation trace files.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! header : b"STAS" | version: u16 (= 1)
//! record : meta_len: u32 | meta: UTF-8 JSON (meta_len bytes)
//!          payload_len: u64 | payload: row-major f32 LE (payload_len bytes)
//! ```
//!
//! Records repeat until end of stream. An activation record's metadata object
//! carries exactly the [`TraceMeta`] fields. Other record kinds carry a
//! `"kind"` discriminator: `"params"` (model checkpoints), `"frame_embeddings"`
//! (per-frame feature vectors) and `"latent"` (sampler outputs).
//!
//! Because records are self-delimiting, the record section of one file can
//! be appended to another file after dropping its 6-byte header.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::tensor::ActivationTensor;
use crate::topology::TokenTopology;

pub const MAGIC: [u8; 4] = *b"STAS";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 6;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic bytes {found:?}, expected \"STAS\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported trace format version {0}")]
    UnsupportedVersion(u16),
    #[error("stream ended before the header was complete")]
    TruncatedHeader,
    #[error("record {record} is truncated")]
    Truncated { record: usize },
    #[error("record {record} contains a non-finite value at flat index {index}")]
    NonFinite { record: usize, index: usize },
    #[error("record {record} has invalid metadata: {reason}")]
    InvalidMeta { record: usize, reason: String },
    #[error("record {record}: payload of {payload_len} bytes does not match {rows}x{cols} f32 data")]
    PayloadLength {
        record: usize,
        payload_len: u64,
        rows: usize,
        cols: usize,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Cond,
    Uncond,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Cond => "cond",
            Branch::Uncond => "uncond",
        }
    }
}

/// Coordinates of one activation snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceMeta {
    pub model_id: String,
    pub block: usize,
    pub step_index: usize,
    pub sigma: f64,
    pub branch: Branch,
    pub prompt_id: String,
    pub num_tokens: usize,
    pub hidden_size: usize,
    pub latent_frames: usize,
    pub tokens_per_frame: usize,
    pub r_temp: usize,
}

impl TraceMeta {
    pub fn topology(&self) -> Result<TokenTopology, crate::topology::TopologyError> {
        TokenTopology::from_latent(self.latent_frames, self.tokens_per_frame, self.r_temp)
    }

    fn validate(&self) -> Result<(), String> {
        if self.num_tokens != self.latent_frames * self.tokens_per_frame {
            return Err(format!(
                "num_tokens {} != latent_frames {} x tokens_per_frame {}",
                self.num_tokens, self.latent_frames, self.tokens_per_frame
            ));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(format!("sigma {} outside [0, 1]", self.sigma));
        }
        self.topology().map_err(|e| e.to_string())?;
        Ok(())
    }
}

/// Named parameter matrix of a model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamMeta {
    pub model_id: String,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// One video's per-frame embeddings (rows = pixel frames).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingMeta {
    pub video_id: String,
    pub source_label: String,
    pub frame_count: usize,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_temp: Option<usize>,
}

/// Sampler output latent (rows = tokens, cols = patch channels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentMeta {
    pub model_id: String,
    pub prompt_id: String,
    pub seed: u64,
    pub num_tokens: usize,
    pub channels: usize,
    pub latent_frames: usize,
    pub tokens_per_frame: usize,
    pub r_temp: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordMeta {
    Activation(TraceMeta),
    Params(ParamMeta),
    FrameEmbeddings(EmbeddingMeta),
    Latent(LatentMeta),
}

impl RecordMeta {
    pub fn kind(&self) -> &'static str {
        match self {
            RecordMeta::Activation(_) => "activation",
            RecordMeta::Params(_) => "params",
            RecordMeta::FrameEmbeddings(_) => "frame_embeddings",
            RecordMeta::Latent(_) => "latent",
        }
    }

    /// Declared `(rows, cols)` of the payload.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            RecordMeta::Activation(m) => (m.num_tokens, m.hidden_size),
            RecordMeta::Params(m) => (m.rows, m.cols),
            RecordMeta::FrameEmbeddings(m) => (m.frame_count, m.dim),
            RecordMeta::Latent(m) => (m.num_tokens, m.channels),
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            RecordMeta::Activation(m) => m.validate(),
            RecordMeta::Latent(m) => {
                if m.num_tokens != m.latent_frames * m.tokens_per_frame {
                    return Err("latent num_tokens does not match topology".into());
                }
                TokenTopology::from_latent(m.latent_frames, m.tokens_per_frame, m.r_temp)
                    .map(|_| ())
                    .map_err(|e| e.to_string())
            }
            RecordMeta::Params(_) | RecordMeta::FrameEmbeddings(_) => Ok(()),
        }
    }

    fn to_json(&self) -> Vec<u8> {
        let value = match self {
            RecordMeta::Activation(m) => serde_json::to_value(m),
            RecordMeta::Params(m) => tagged("params", m),
            RecordMeta::FrameEmbeddings(m) => tagged("frame_embeddings", m),
            RecordMeta::Latent(m) => tagged("latent", m),
        }
        .expect("metadata serializes");
        serde_json::to_vec(&value).expect("metadata serializes")
    }

    fn from_json(bytes: &[u8]) -> Result<Self, String> {
        let mut value: Value = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
        let obj = value.as_object_mut().ok_or("metadata is not a JSON object")?;
        let kind = match obj.remove("kind") {
            None => None,
            Some(Value::String(s)) => Some(s),
            Some(other) => return Err(format!("kind must be a string, got {other}")),
        };
        let parsed = match kind.as_deref() {
            None => serde_json::from_value(value).map(RecordMeta::Activation),
            Some("params") => serde_json::from_value(value).map(RecordMeta::Params),
            Some("frame_embeddings") => serde_json::from_value(value).map(RecordMeta::FrameEmbeddings),
            Some("latent") => serde_json::from_value(value).map(RecordMeta::Latent),
            Some(other) => return Err(format!("unknown record kind {other:?}")),
        };
        parsed.map_err(|e| e.to_string())
    }
}

fn tagged<T: Serialize>(kind: &str, meta: &T) -> serde_json::Result<Value> {
    let mut value = serde_json::to_value(meta)?;
    if let Value::Object(obj) = &mut value {
        obj.insert("kind".into(), Value::String(kind.into()));
    }
    Ok(value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub meta: RecordMeta,
    pub data: ActivationTensor,
}

impl TraceRecord {
    pub fn activation(meta: TraceMeta, data: ActivationTensor) -> Self {
        Self {
            meta: RecordMeta::Activation(meta),
            data,
        }
    }

    pub fn activation_meta(&self) -> Option<&TraceMeta> {
        match &self.meta {
            RecordMeta::Activation(m) => Some(m),
            _ => None,
        }
    }

    fn validate(&self, record: usize) -> Result<(), TraceError> {
        self.meta
            .validate()
            .map_err(|reason| TraceError::InvalidMeta { record, reason })?;
        let (rows, cols) = self.meta.shape();
        if self.data.shape() != (rows, cols) {
            return Err(TraceError::InvalidMeta {
                record,
                reason: format!(
                    "metadata declares {rows}x{cols} but data is {}x{}",
                    self.data.rows(),
                    self.data.cols()
                ),
            });
        }
        if let Some(index) = self.data.first_non_finite() {
            return Err(TraceError::NonFinite { record, index });
        }
        Ok(())
    }
}

pub fn write_header<W: Write>(sink: &mut W) -> io::Result<usize> {
    sink.write_all(&MAGIC)?;
    sink.write_all(&VERSION.to_le_bytes())?;
    Ok(HEADER_LEN)
}

/// Encode one record (no header). Returns bytes written.
pub fn write_record<W: Write>(sink: &mut W, record: &TraceRecord) -> Result<usize, TraceError> {
    record.validate(0)?;
    Ok(encode_record(sink, record)?)
}

fn encode_record<W: Write>(sink: &mut W, record: &TraceRecord) -> io::Result<usize> {
    let meta = record.meta.to_json();
    let meta_len = u32::try_from(meta.len()).map_err(|_| io::Error::other("metadata longer than u32::MAX"))?;
    sink.write_all(&meta_len.to_le_bytes())?;
    sink.write_all(&meta)?;
    let values = record.data.as_slice();
    let payload_len = (values.len() * 4) as u64;
    sink.write_all(&payload_len.to_le_bytes())?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(4 + meta.len() + 8 + buf.len())
}

/// Write a complete trace file. Every record is validated before the first
/// byte is emitted; the sink is flushed on success.
pub fn write_records<W: Write>(sink: &mut W, records: &[TraceRecord]) -> Result<usize, TraceError> {
    for (i, r) in records.iter().enumerate() {
        r.validate(i)?;
    }
    let mut total = write_header(sink)?;
    for r in records {
        total += encode_record(sink, r)?;
    }
    sink.flush()?;
    Ok(total)
}

/// Incremental writer for long captures.
pub struct TraceWriter<W: Write> {
    sink: W,
    bytes: usize,
    records: usize,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut sink: W) -> Result<Self, TraceError> {
        let bytes = write_header(&mut sink)?;
        Ok(Self {
            sink,
            bytes,
            records: 0,
        })
    }

    pub fn append(&mut self, record: &TraceRecord) -> Result<(), TraceError> {
        record.validate(self.records)?;
        self.bytes += encode_record(&mut self.sink, record)?;
        self.records += 1;
        Ok(())
    }

    pub fn bytes_written(&self) -> usize {
        self.bytes
    }

    pub fn finish(mut self) -> Result<W, TraceError> {
        self.sink.flush()?;
        Ok(self.sink)
    }
}

/// Streaming reader; yields one record at a time and stops after the first
/// error.
pub struct TraceReader<R: Read> {
    source: R,
    next_index: usize,
    done: bool,
}

impl<R: Read> TraceReader<R> {
    pub fn new(mut source: R) -> Result<Self, TraceError> {
        let mut header = [0u8; HEADER_LEN];
        let n = read_fully(&mut source, &mut header)?;
        if n < 4 {
            return Err(TraceError::TruncatedHeader);
        }
        let magic = [header[0], header[1], header[2], header[3]];
        if magic != MAGIC {
            return Err(TraceError::BadMagic { found: magic });
        }
        if n < HEADER_LEN {
            return Err(TraceError::TruncatedHeader);
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != VERSION {
            return Err(TraceError::UnsupportedVersion(version));
        }
        Ok(Self {
            source,
            next_index: 0,
            done: false,
        })
    }

    fn read_next(&mut self) -> Result<Option<TraceRecord>, TraceError> {
        let record = self.next_index;
        let truncated = || TraceError::Truncated { record };

        let mut len_buf = [0u8; 4];
        match read_fully(&mut self.source, &mut len_buf)? {
            0 => return Ok(None),
            4 => {}
            _ => return Err(truncated()),
        }
        let meta_len = u32::from_le_bytes(len_buf) as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        if read_fully(&mut self.source, &mut meta_bytes)? != meta_len {
            return Err(truncated());
        }
        let meta = RecordMeta::from_json(&meta_bytes).map_err(|reason| TraceError::InvalidMeta { record, reason })?;
        meta.validate()
            .map_err(|reason| TraceError::InvalidMeta { record, reason })?;

        let mut plen_buf = [0u8; 8];
        if read_fully(&mut self.source, &mut plen_buf)? != 8 {
            return Err(truncated());
        }
        let payload_len = u64::from_le_bytes(plen_buf);
        let (rows, cols) = meta.shape();
        if payload_len != (rows as u64) * (cols as u64) * 4 {
            return Err(TraceError::PayloadLength {
                record,
                payload_len,
                rows,
                cols,
            });
        }
        let mut payload = vec![0u8; payload_len as usize];
        if read_fully(&mut self.source, &mut payload)? != payload.len() {
            return Err(truncated());
        }
        let mut values = Vec::with_capacity(rows * cols);
        for (index, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(TraceError::NonFinite { record, index });
            }
            values.push(v);
        }
        let data = ActivationTensor::from_vec(rows, cols, values).expect("length checked");
        self.next_index += 1;
        Ok(Some(TraceRecord { meta, data }))
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = Result<TraceRecord, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.read_next() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Read a whole trace stream into memory.
pub fn read_records<R: Read>(source: R) -> Result<Vec<TraceRecord>, TraceError> {
    TraceReader::new(source)?.collect()
}

/// Like `read_exact`, but reports how many bytes were available before EOF.
fn read_fully<R: Read>(source: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(tokens_per_frame: usize, latent_frames: usize, hidden: usize) -> TraceMeta {
        TraceMeta {
            model_id: "toy".into(),
            block: 2,
            step_index: 5,
            sigma: 0.9,
            branch: Branch::Cond,
            prompt_id: "p0".into(),
            num_tokens: tokens_per_frame * latent_frames,
            hidden_size: hidden,
            latent_frames,
            tokens_per_frame,
            r_temp: 4,
        }
    }

    fn record() -> TraceRecord {
        let data = ActivationTensor::from_fn(4, 3, |r, c| (r * 3 + c) as f32 - 5.5);
        TraceRecord::activation(meta(2, 2, 3), data)
    }

    #[test]
    fn empty_file_is_header_only() {
        let mut buf = Vec::new();
        assert_eq!(write_records(&mut buf, &[]).unwrap(), 6);
        assert_eq!(buf, b"STAS\x01\x00");
        assert!(read_records(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn payload_is_rows_times_cols_floats() {
        let mut buf = Vec::new();
        let n = write_records(&mut buf, &[record()]).unwrap();
        assert_eq!(n, buf.len());
        let meta_len = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
        let plen_at = 10 + meta_len;
        let payload_len = u64::from_le_bytes(buf[plen_at..plen_at + 8].try_into().unwrap());
        assert_eq!(payload_len, 48);
        assert_eq!(buf.len(), plen_at + 8 + 48);
        // metadata is a JSON object with exactly the TraceMeta fields
        let json: Value = serde_json::from_slice(&buf[10..10 + meta_len]).unwrap();
        let mut keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "block",
                "branch",
                "hidden_size",
                "latent_frames",
                "model_id",
                "num_tokens",
                "prompt_id",
                "r_temp",
                "sigma",
                "step_index",
                "tokens_per_frame"
            ]
        );
    }

    #[test]
    fn round_trip() {
        let mut buf = Vec::new();
        let records = vec![record(), record()];
        write_records(&mut buf, &records).unwrap();
        assert_eq!(read_records(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn bad_magic() {
        let mut buf = Vec::new();
        write_records(&mut buf, &[record()]).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_records(buf.as_slice()), Err(TraceError::BadMagic { .. })));
    }

    #[test]
    fn unsupported_version() {
        let mut buf = Vec::new();
        write_records(&mut buf, &[]).unwrap();
        buf[4] = 2;
        assert!(matches!(
            read_records(buf.as_slice()),
            Err(TraceError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn truncation_names_record() {
        let mut buf = Vec::new();
        write_records(&mut buf, &[record(), record()]).unwrap();
        buf.truncate(buf.len() - 10);
        let mut reader = TraceReader::new(buf.as_slice()).unwrap();
        assert!(reader.next().unwrap().is_ok());
        assert!(matches!(reader.next(), Some(Err(TraceError::Truncated { record: 1 }))));
        assert!(reader.next().is_none());
    }

    #[test]
    fn non_finite_rejected_on_read_and_write() {
        let mut r = record();
        r.data.set(1, 1, f32::NAN);
        let mut buf = Vec::new();
        assert!(matches!(
            write_records(&mut buf, &[record(), r.clone()]),
            Err(TraceError::NonFinite { record: 1, index: 4 })
        ));
        assert!(buf.is_empty(), "nothing written on validation failure");

        // Forge the file by hand.
        write_header(&mut buf).unwrap();
        encode_record(&mut buf, &r).unwrap();
        assert!(matches!(
            read_records(buf.as_slice()),
            Err(TraceError::NonFinite { record: 0, index: 4 })
        ));
    }

    #[test]
    fn invariant_violation_rejected_before_write() {
        let mut r = record();
        if let RecordMeta::Activation(m) = &mut r.meta {
            m.sigma = 1.5;
        }
        let mut buf = Vec::new();
        assert!(matches!(
            write_records(&mut buf, &[r]),
            Err(TraceError::InvalidMeta { record: 0, .. })
        ));
        assert!(buf.is_empty());
    }

    #[test]
    fn other_record_kinds_round_trip() {
        let records = vec![
            TraceRecord {
                meta: RecordMeta::Params(ParamMeta {
                    model_id: "toy".into(),
                    name: "blocks.0.attn.wq".into(),
                    rows: 2,
                    cols: 2,
                }),
                data: ActivationTensor::from_vec(2, 2, vec![1.0, -2.0, 3.5, 0.0]).unwrap(),
            },
            TraceRecord {
                meta: RecordMeta::FrameEmbeddings(EmbeddingMeta {
                    video_id: "v0".into(),
                    source_label: "raw".into(),
                    frame_count: 3,
                    dim: 2,
                    r_temp: Some(2),
                }),
                data: ActivationTensor::zeros(3, 2),
            },
        ];
        let mut buf = Vec::new();
        write_records(&mut buf, &records).unwrap();
        assert_eq!(read_records(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn unknown_kind_and_extra_fields_rejected() {
        for meta in [
            r#"{"kind":"weird"}"#,
            r#"{"kind":"params","model_id":"m","name":"n","rows":0,"cols":0,"x":1}"#,
        ] {
            let mut buf = Vec::new();
            write_header(&mut buf).unwrap();
            buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
            buf.extend_from_slice(meta.as_bytes());
            buf.extend_from_slice(&0u64.to_le_bytes());
            assert!(matches!(
                read_records(buf.as_slice()),
                Err(TraceError::InvalidMeta { record: 0, .. })
            ));
        }
    }
}
