//! Checkpoint container: a `NTCK` magic, a version word, a JSON index, and a
//! raw little-endian f32 payload. Tensor records are laid out in
//! lexicographic name order, so identical parameter sets serialize to
//! identical bytes.

use crate::param::NamedParamSet;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"NTCK";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "ntck";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected {MAGIC:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {0}, expected {VERSION}")]
    UnsupportedVersion(u32),
    #[error("file truncated: {context} needs {needed} bytes, {available} available")]
    Truncated {
        context: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("header is not valid JSON: {0}")]
    Header(#[from] serde_json::Error),
    #[error("tensor `{name}` has unsupported dtype `{dtype}`")]
    Dtype { name: String, dtype: String },
    #[error(
        "tensor `{name}` spans bytes {offset}..{end} but payload is {payload_len} bytes",
        end = offset + byte_length
    )]
    OutOfBounds {
        name: String,
        offset: u64,
        byte_length: u64,
        payload_len: u64,
    },
    #[error("tensor `{name}` shape {shape:?} needs {expected} bytes, record claims {got}")]
    LengthMismatch {
        name: String,
        shape: Vec<usize>,
        expected: u64,
        got: u64,
    },
    #[error("tensor `{name}` holds a non-finite value at element {index}")]
    NonFinite { name: String, index: usize },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    byte_length: u64,
}

/// Serializes a parameter set. Trainability is intentionally not stored:
/// loaded tensors default to trainable and callers freeze by name.
pub fn to_bytes(params: &NamedParamSet<f32>) -> Vec<u8> {
    let mut records: BTreeMap<&str, TensorRecord> = BTreeMap::new();
    let mut offset = 0u64;
    for (name, entry) in params.iter() {
        let byte_length = (entry.tensor.numel() * 4) as u64;
        records.insert(
            name,
            TensorRecord {
                shape: entry.tensor.shape().to_vec(),
                dtype: "f32".to_string(),
                offset,
                byte_length,
            },
        );
        offset += byte_length;
    }
    let header = serde_json::to_vec(&records).expect("record serialization is infallible");

    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, entry) in params.iter() {
        for v in entry.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<NamedParamSet<f32>, CheckpointError> {
    let need = |context: &'static str, needed: u64, available: u64| CheckpointError::Truncated {
        context,
        needed,
        available,
    };
    if bytes.len() < 4 {
        return Err(need("magic", 4, bytes.len() as u64));
    }
    if bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes[..4].to_vec(),
        });
    }
    if bytes.len() < 16 {
        return Err(need("fixed header", 16, bytes.len() as u64));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body_start = 16u64
        .checked_add(header_len)
        .ok_or(need("header", u64::MAX, bytes.len() as u64))?;
    if (bytes.len() as u64) < body_start {
        return Err(need("header", body_start, bytes.len() as u64));
    }
    let header: BTreeMap<String, TensorRecord> =
        serde_json::from_slice(&bytes[16..body_start as usize])?;
    let payload = &bytes[body_start as usize..];
    let payload_len = payload.len() as u64;

    let mut params = NamedParamSet::new();
    for (name, rec) in header {
        if rec.dtype != "f32" {
            return Err(CheckpointError::Dtype {
                name,
                dtype: rec.dtype,
            });
        }
        let numel: usize = rec.shape.iter().product();
        let expected = (numel * 4) as u64;
        if expected != rec.byte_length {
            return Err(CheckpointError::LengthMismatch {
                name,
                shape: rec.shape,
                expected,
                got: rec.byte_length,
            });
        }
        let end = rec.offset.checked_add(rec.byte_length).unwrap_or(u64::MAX);
        if end > payload_len {
            return Err(CheckpointError::OutOfBounds {
                name,
                offset: rec.offset,
                byte_length: rec.byte_length,
                payload_len,
            });
        }
        let raw = &payload[rec.offset as usize..end as usize];
        let mut data = Vec::with_capacity(numel);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(CheckpointError::NonFinite { name, index: i });
            }
            data.push(v);
        }
        let tensor = Tensor::from_raw(rec.shape, data);
        params
            .insert(&name, tensor, true)
            .expect("names from a JSON map are unique and non-empty");
    }
    Ok(params)
}

pub fn save(path: &Path, params: &NamedParamSet<f32>) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(params)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<NamedParamSet<f32>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}
