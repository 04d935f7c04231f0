//! The binary container shared by datasets, checkpoints and rollout exports:
//! 8 magic bytes, the header length as a little-endian `u64`, a JSON header,
//! then a payload of little-endian `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"GGODE\0\0\x01";
pub const FORMAT_VERSION: u32 = 1;

/// Fields every container header carries next to its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<H> {
    pub kind: String,
    pub version: u32,
    /// Number of `f64` values in the payload.
    pub payload_len: usize,
    #[serde(flatten)]
    pub header: H,
}

/// A named slice of the payload, offsets in bytes from the payload start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    pub fn slice<'a>(&self, payload: &'a [f64]) -> Result<&'a [f64]> {
        if self.offset % 8 != 0 {
            return Err(Error::format(format!("misaligned offset {}", self.offset)));
        }
        let start = self.offset / 8;
        payload
            .get(start..start + self.len)
            .ok_or_else(|| Error::format(format!("span {}+{} outside payload", start, self.len)))
    }
}

/// Accumulates arrays into a payload and hands out their spans.
#[derive(Debug, Default)]
pub struct PayloadBuilder {
    data: Vec<f64>,
}

impl PayloadBuilder {
    pub fn push(&mut self, values: &[f64]) -> Span {
        let span = Span {
            offset: self.data.len() * 8,
            len: values.len(),
        };
        self.data.extend_from_slice(values);
        span
    }

    pub fn finish(self) -> Vec<f64> {
        self.data
    }
}

pub fn write_to<W: Write, H: Serialize>(w: &mut W, kind: &str, header: H, payload: &[f64]) -> Result<()> {
    let env = Envelope {
        kind: kind.to_string(),
        version: FORMAT_VERSION,
        payload_len: payload.len(),
        header,
    };
    let json = serde_json::to_vec(&env)?;
    let fail = |e| Error::io("<stream>", e);
    w.write_all(&MAGIC).map_err(fail)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(fail)?;
    w.write_all(&json).map_err(fail)?;
    let mut bytes = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).map_err(fail)
}

pub fn read_from<R: Read, H: DeserializeOwned>(r: &mut R, kind: &str) -> Result<(H, Vec<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("file too short for a container"))?;
    if magic != MAGIC {
        return Err(Error::format("bad magic bytes"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| Error::format("truncated header length"))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = Vec::new();
    r.by_ref()
        .take(len as u64)
        .read_to_end(&mut json)
        .map_err(|e| Error::io("<stream>", e))?;
    if json.len() != len {
        return Err(Error::format("truncated header"));
    }
    let probe: Envelope<serde_json::Value> = serde_json::from_slice(&json)?;
    if probe.version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            probe.version
        )));
    }
    if probe.kind != kind {
        return Err(Error::format(format!("expected a {kind} file, found {}", probe.kind)));
    }
    let env: Envelope<H> = serde_json::from_slice(&json)?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<stream>", e))?;
    if bytes.len() != env.payload_len * 8 {
        return Err(Error::format(format!(
            "payload holds {} bytes, header declares {} values",
            bytes.len(),
            env.payload_len
        )));
    }
    let payload = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((env.header, payload))
}

pub fn write_file<H: Serialize>(path: &Path, kind: &str, header: H, payload: &[f64]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, kind, header, payload).map_err(|e| relabel(e, path))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_file<H: DeserializeOwned>(path: &Path, kind: &str) -> Result<(H, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(&mut BufReader::new(file), kind).map_err(|e| relabel(e, path))
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        Error::Format(msg) => Error::format(format!("{}: {msg}", path.display())),
        other => other,
    }
}
