//! Pool container: `"OWMP"`, a version byte, a `u32` little-endian header
//! length, the UTF-8 JSON header, little-endian `f64` payloads in manifest
//! order, and a trailing little-endian CRC32 of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    ConceptMemory, InteractionMemory, InteractionMemoryLayer, LowRankPair, MemoryError, MemoryPool,
    MemoryTriplet, Result, StepMemories,
};
use crate::detector::{lora_param_name, projection_slots, DetectorConfig, PROMPT_PARAM};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OWMP";
pub const VERSION: u8 = 0x01;
const PREFIX: usize = 4 + 1 + 4;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: DetectorConfig,
    steps: usize,
    triplets: Vec<TripletHeader>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TripletHeader {
    step: usize,
    label_set: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    offset: usize,
}

fn fmt_err(offset: usize, detail: impl Into<String>) -> MemoryError {
    MemoryError::Format {
        offset,
        detail: detail.into(),
    }
}

fn triplet_tensors(t: &MemoryTriplet) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let d = t.prototypes.first().map_or(0, Vec::len);
    let mut out = vec![(
        format!("t{}.proto", t.step),
        vec![t.prototypes.len(), d],
        t.prototypes.concat(),
    )];
    for (name, tensor) in t.memories.named_tensors() {
        out.push((
            format!("t{}.{name}", t.step),
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
        ));
    }
    out
}

/// Serialize a pool into its canonical container bytes.
pub fn encode_pool(pool: &MemoryPool) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for t in pool.triplets() {
        for (name, shape, data) in triplet_tensors(t) {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: payload.len(),
            });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        config: pool.config().clone(),
        steps: pool.len(),
        triplets: pool
            .triplets()
            .iter()
            .map(|t| TripletHeader {
                step: t.step,
                label_set: t.label_set.clone(),
            })
            .collect(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX + json.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parse container bytes. Nothing is returned unless the whole file checks out.
pub fn decode_pool(bytes: &[u8]) -> Result<MemoryPool> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fmt_err(0, "bad magic"));
    }
    match bytes.get(4) {
        Some(&VERSION) => {}
        Some(v) => return Err(fmt_err(4, format!("unsupported version {v}"))),
        None => return Err(fmt_err(4, "truncated before version")),
    }
    if bytes.len() < PREFIX + 4 {
        return Err(fmt_err(bytes.len(), "truncated before header"));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(fmt_err(body_end, "checksum mismatch"));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let payload_start = PREFIX
        .checked_add(hlen)
        .filter(|&e| e <= body_end)
        .ok_or_else(|| fmt_err(5, format!("header length {hlen} exceeds file")))?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX..payload_start])
        .map_err(|e| fmt_err(PREFIX + e.column().saturating_sub(1), format!("header: {e}")))?;
    if header.steps != header.triplets.len() {
        return Err(fmt_err(PREFIX, "step count disagrees with triplet list"));
    }
    let payload = &bytes[payload_start..body_end];
    let mut cursor = 0usize;
    let mut next = header.tensors.iter();
    let mut read = |want: &str| -> Result<Tensor> {
        let e = next
            .next()
            .ok_or_else(|| fmt_err(PREFIX, format!("manifest lacks `{want}`")))?;
        if e.name != want {
            return Err(fmt_err(PREFIX, format!("expected `{want}`, found `{}`", e.name)));
        }
        if e.offset != cursor {
            return Err(fmt_err(payload_start + e.offset, format!("`{want}` is not contiguous")));
        }
        let n: usize = e.shape.iter().product();
        let end = cursor + n * 8;
        if end > payload.len() || n == 0 {
            return Err(fmt_err(payload_start + cursor, format!("`{want}` overruns payload")));
        }
        let data = payload[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        cursor = end;
        Tensor::new(e.shape.clone(), data).map_err(|err| fmt_err(payload_start + e.offset, err.to_string()))
    };

    let config = header.config.clone();
    let mut pool = MemoryPool::new(config.clone());
    for th in &header.triplets {
        let t = th.step;
        let proto = read(&format!("t{t}.proto"))?;
        let prototypes = (0..proto.rows()).map(|r| proto.row(r).to_vec()).collect();
        let mut names: Vec<String> = Vec::new();
        if config.prompt_length > 0 {
            names.push(PROMPT_PARAM.to_string());
        }
        for l in 0..config.lora_layers {
            for slot in projection_slots(config.tie_qk) {
                names.push(lora_param_name(l, slot, "a"));
                names.push(lora_param_name(l, slot, "b"));
            }
        }
        names.sort();
        let mut concept = None;
        let mut layers: Vec<InteractionMemoryLayer> = (0..config.lora_layers)
            .map(|_| InteractionMemoryLayer {
                slots: Default::default(),
            })
            .collect();
        let mut halves: std::collections::BTreeMap<(usize, String), (Option<Tensor>, Option<Tensor>)> =
            Default::default();
        for name in names {
            let tensor = read(&format!("t{t}.{name}"))?;
            if name == PROMPT_PARAM {
                concept = Some(ConceptMemory { prompt: tensor });
                continue;
            }
            let parts: Vec<&str> = name.split('.').collect();
            let layer: usize = parts[1].parse().expect("generated name");
            let entry = halves.entry((layer, parts[2].to_string())).or_default();
            if parts[3] == "a" {
                entry.0 = Some(tensor);
            } else {
                entry.1 = Some(tensor);
            }
        }
        for ((layer, slot), (a, b)) in halves {
            let (a, b) = (a.expect("a read"), b.expect("b read"));
            layers[layer].slots.insert(slot, LowRankPair { a, b });
        }
        let memories = StepMemories {
            concept,
            interaction: InteractionMemory { layers },
        };
        let triplet = MemoryTriplet::new(t, th.label_set.clone(), prototypes, memories)
            .map_err(|e| fmt_err(payload_start, e.to_string()))?;
        pool.memorize(triplet)
            .map_err(|e| fmt_err(PREFIX, e.to_string()))?;
    }
    if next.next().is_some() || cursor != payload.len() {
        return Err(fmt_err(payload_start + cursor, "trailing payload"));
    }
    Ok(pool)
}

/// Write atomically: a sibling temp file is synced, then renamed over `path`.
pub fn save_pool(pool: &MemoryPool, path: &Path) -> Result<()> {
    let bytes = encode_pool(pool);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| MemoryError::Io(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    let io = |e: std::io::Error| MemoryError::Io(format!("{}: {e}", path.display()));
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_pool(path: &Path) -> Result<MemoryPool> {
    let bytes = fs::read(path).map_err(|e| MemoryError::Io(format!("{}: {e}", path.display())))?;
    decode_pool(&bytes)
}
