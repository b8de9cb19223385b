//! Base checkpoint container: `"OWBC"`, a version byte, a `u32` little-endian
//! header length, the UTF-8 JSON header, little-endian `f64` payloads in
//! header order, and a trailing little-endian CRC32 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_artifact, ExperimentError, Result};
use crate::detector::{Detector, DetectorConfig};
use crate::tensor::{ParamStore, Tensor};

pub const BASE_MAGIC: &[u8; 4] = b"OWBC";
pub const BASE_VERSION: u8 = 0x01;
const PREFIX: usize = 4 + 1 + 4;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: DetectorConfig,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

fn fmt_err(offset: usize, detail: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Data(format!("base checkpoint at byte {offset}: {detail}"))
}

pub fn encode_base(detector: &Detector) -> Vec<u8> {
    let params = detector.params();
    let header = Header {
        config: detector.config().clone(),
        tensors: params
            .iter()
            .map(|(name, t)| Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX + json.len() + 8 * params.num_scalars() + 4);
    out.extend_from_slice(BASE_MAGIC);
    out.push(BASE_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parse a checkpoint; the restored detector is frozen.
pub fn decode_base(bytes: &[u8]) -> Result<Detector> {
    if bytes.len() < PREFIX + 4 {
        return Err(fmt_err(0, "truncated"));
    }
    if &bytes[..4] != BASE_MAGIC {
        return Err(fmt_err(0, "bad magic"));
    }
    if bytes[4] != BASE_VERSION {
        return Err(fmt_err(4, format!("unsupported version {}", bytes[4])));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(fmt_err(bytes.len() - 4, "checksum mismatch"));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let payload_start = PREFIX
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| fmt_err(5, "header length past end"))?;
    let header: Header =
        serde_json::from_slice(&body[PREFIX..payload_start]).map_err(|e| fmt_err(PREFIX, e))?;
    let mut cursor = payload_start;
    let mut params = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = cursor + 8 * n;
        if end > body.len() {
            return Err(fmt_err(cursor, format!("payload of `{}` truncated", e.name)));
        }
        let data = body[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| fmt_err(cursor, err))?;
        params
            .insert(e.name.clone(), t)
            .map_err(|_| fmt_err(cursor, format!("duplicate tensor `{}`", e.name)))?;
        cursor = end;
    }
    if cursor != body.len() {
        return Err(fmt_err(cursor, "trailing payload"));
    }
    let mut det = Detector::from_parts(header.config, params)
        .map_err(|e| ExperimentError::Data(format!("base checkpoint: {e}")))?;
    det.freeze();
    Ok(det)
}

pub fn save_base(detector: &Detector, path: &Path) -> Result<()> {
    write_artifact(path, &encode_base(detector))
}

pub fn load_base(path: &Path) -> Result<Detector> {
    let bytes =
        std::fs::read(path).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
    decode_base(&bytes)
}
