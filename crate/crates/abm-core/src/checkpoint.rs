//! ABM-CKPT v1: bit-exact binary checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! bytes 0..4    magic "ABCK"
//! bytes 4..8    u32 version = 1
//! bytes 8..16   u64 header length H
//! bytes 16..16+H  UTF-8 JSON: {name: {"dtype":"f32","shape":[..],
//!                  "offset":u64,"nbytes":u64}, "__meta__": {k: v}}
//! bytes 16+H..  data region: row-major f32 payloads, no padding,
//!               offsets relative to the region start
//! ```
//!
//! Tensors are laid out in lexicographic name order, so
//! write -> read -> write is byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParameterMap;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ABCK";
pub const VERSION: u32 = 1;
const META_KEY: &str = "__meta__";

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected {MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {found}, expected {VERSION}")]
    VersionMismatch { found: u32 },
    #[error("file truncated: need {needed} bytes, have {have}")]
    Truncated { needed: u64, have: u64 },
    #[error("tensor {name}: offset {offset} + {nbytes} bytes overruns data region of {region} bytes")]
    OffsetOverrun {
        name: String,
        offset: u64,
        nbytes: u64,
        region: u64,
    },
    #[error("tensor {name}: shape {shape:?} needs {expected} bytes, entry says {nbytes}")]
    SizeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: u64,
        nbytes: u64,
    },
    #[error("tensor {name}: non-finite payload at element {index}")]
    NanPayload { name: String, index: usize },
    #[error("tensor {name}: unsupported dtype {dtype}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("malformed header json: {0}")]
    MalformedHeader(String),
}

#[derive(Serialize, Deserialize)]
struct TensorDesc {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

/// Serialize a map to ABM-CKPT v1. Returns the byte count written.
pub fn write_checkpoint(map: &ParameterMap, path: impl AsRef<Path>) -> Result<u64, CkptError> {
    let bytes = encode(map);
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|source| CkptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(&bytes).map_err(|source| CkptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(bytes.len() as u64)
}

/// Encode a map to the in-memory byte representation.
pub fn encode(map: &ParameterMap) -> Vec<u8> {
    // serde_json's default map is BTree-backed, so header keys serialize
    // in sorted order and the encoding is canonical.
    let mut header = serde_json::Map::new();
    let mut offset = 0u64;
    for (name, tensor) in map.iter() {
        let nbytes = (tensor.numel() * 4) as u64;
        header.insert(
            name.to_string(),
            serde_json::to_value(TensorDesc {
                dtype: "f32".to_string(),
                shape: tensor.shape().to_vec(),
                offset,
                nbytes,
            })
            .expect("tensor descriptor serializes"),
        );
        offset += nbytes;
    }
    let meta: BTreeMap<&str, &str> = map
        .metadata()
        .iter()
        .map(|(k, v)| (k.as_str(), v.as_str()))
        .collect();
    header.insert(
        META_KEY.to_string(),
        serde_json::to_value(meta).expect("metadata serializes"),
    );
    let header_bytes = serde_json::to_vec(&serde_json::Value::Object(header))
        .expect("header serializes");

    let mut out = Vec::with_capacity(16 + header_bytes.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, tensor) in map.iter() {
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParameterMap, CkptError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CkptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

/// Decode the in-memory byte representation of a checkpoint.
pub fn decode(bytes: &[u8]) -> Result<ParameterMap, CkptError> {
    if bytes.len() < 16 {
        return Err(CkptError::Truncated {
            needed: 16,
            have: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(CkptError::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CkptError::VersionMismatch { found: version });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let data_start = 16u64
        .checked_add(header_len)
        .ok_or(CkptError::Truncated {
            needed: u64::MAX,
            have: bytes.len() as u64,
        })?;
    if (bytes.len() as u64) < data_start {
        return Err(CkptError::Truncated {
            needed: data_start,
            have: bytes.len() as u64,
        });
    }
    let header: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&bytes[16..data_start as usize])
            .map_err(|e| CkptError::MalformedHeader(e.to_string()))?;
    let region = &bytes[data_start as usize..];
    let region_len = region.len() as u64;

    let mut map = ParameterMap::new();
    for (name, value) in header {
        if name == META_KEY {
            let meta: BTreeMap<String, String> = serde_json::from_value(value)
                .map_err(|e| CkptError::MalformedHeader(e.to_string()))?;
            for (k, v) in meta {
                map.set_meta(k, v);
            }
            continue;
        }
        let desc: TensorDesc = serde_json::from_value(value)
            .map_err(|e| CkptError::MalformedHeader(e.to_string()))?;
        if desc.dtype != "f32" {
            return Err(CkptError::UnsupportedDtype {
                name,
                dtype: desc.dtype,
            });
        }
        let expected = (desc.shape.iter().product::<usize>() * 4) as u64;
        if expected != desc.nbytes {
            return Err(CkptError::SizeMismatch {
                name,
                shape: desc.shape,
                expected,
                nbytes: desc.nbytes,
            });
        }
        let end = desc.offset.checked_add(desc.nbytes);
        if end.is_none() || end.unwrap() > region_len {
            return Err(CkptError::OffsetOverrun {
                name,
                offset: desc.offset,
                nbytes: desc.nbytes,
                region: region_len,
            });
        }
        let payload = &region[desc.offset as usize..(desc.offset + desc.nbytes) as usize];
        let mut data = Vec::with_capacity(payload.len() / 4);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(CkptError::NanPayload { name, index: i });
            }
            data.push(v);
        }
        let tensor = Tensor::new(desc.shape, data)
            .map_err(|e| CkptError::MalformedHeader(e.to_string()))?;
        map.insert(name, tensor);
    }
    Ok(map)
}

/// One mismatch found while comparing parameter maps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeMismatch {
    /// Name present in one map but not another; fields: name, map index
    /// holding it, map index missing it.
    MissingName {
        name: String,
        present_in: usize,
        missing_from: usize,
    },
    ShapeDiffers {
        name: String,
        shape_a: Vec<usize>,
        shape_b: Vec<usize>,
        map_a: usize,
        map_b: usize,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CompatReport {
    pub compatible: bool,
    pub mismatches: Vec<ShapeMismatch>,
}

/// Compare >= 2 maps: success iff identical name sets and per-name shapes.
/// Every mismatch is listed; nothing errors.
pub fn validate_compatibility(maps: &[&ParameterMap]) -> CompatReport {
    assert!(maps.len() >= 2, "need at least two maps to compare");
    let mut mismatches = Vec::new();
    let all_names: BTreeSet<&str> = maps.iter().flat_map(|m| m.names()).collect();
    for name in all_names {
        let mut first_holder = None;
        for (i, map) in maps.iter().enumerate() {
            if map.get(name).is_some() && first_holder.is_none() {
                first_holder = Some(i);
            }
        }
        let holder = first_holder.expect("name came from some map");
        for (i, map) in maps.iter().enumerate() {
            match map.get(name) {
                None => mismatches.push(ShapeMismatch::MissingName {
                    name: name.to_string(),
                    present_in: holder,
                    missing_from: i,
                }),
                Some(t) => {
                    let reference = maps[holder].get(name).unwrap();
                    if i != holder && t.shape() != reference.shape() {
                        mismatches.push(ShapeMismatch::ShapeDiffers {
                            name: name.to_string(),
                            shape_a: reference.shape().to_vec(),
                            shape_b: t.shape().to_vec(),
                            map_a: holder,
                            map_b: i,
                        });
                    }
                }
            }
        }
    }
    CompatReport {
        compatible: mismatches.is_empty(),
        mismatches,
    }
}
