//! Binary tensor container.
//!
//! Layout (little-endian):
//!
//! ```text
//! [0..8)        u64 header length H
//! [8..8+H)      UTF-8 JSON header: {name: {"data_offsets": [begin, end], "dtype", "shape"}}
//! [8+H..)       payload, tensors back to back in lexicographic name order
//! ```
//!
//! This is the safetensors layout. Keys are written sorted and without
//! whitespace so equal contents always produce equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TailorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    BF16,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::BF16 => 2,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn to_f32(&self) -> Option<Vec<f32>> {
        (self.dtype == Dtype::F32).then(|| {
            self.data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        })
    }

    pub fn to_bf16_bits(&self) -> Option<Vec<u16>> {
        (self.dtype == Dtype::BF16).then(|| {
            self.data
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect()
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    data_offsets: [u64; 2],
    dtype: Dtype,
    shape: Vec<usize>,
}

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TensorContainer {
    pub tensors: BTreeMap<String, TensorEntry>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, shape: Vec<usize>, values: &[f32]) {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.tensors.insert(
            name.into(),
            TensorEntry {
                dtype: Dtype::F32,
                shape,
                data,
            },
        );
    }

    pub fn insert_bf16(&mut self, name: impl Into<String>, shape: Vec<usize>, bits: &[u16]) {
        let data = bits.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.tensors.insert(
            name.into(),
            TensorEntry {
                dtype: Dtype::BF16,
                shape,
                data,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.get(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = header_json(
            self.tensors
                .iter()
                .map(|(name, e)| (name.as_str(), e.dtype, e.shape.as_slice())),
        );
        let payload_len: usize = self.tensors.values().map(|e| e.data.len()).sum();
        let mut out = Vec::with_capacity(8 + header.len() + payload_len);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for entry in self.tensors.values() {
            out.extend_from_slice(&entry.data);
        }
        out
    }

    /// Parse and validate container bytes. `origin` is only used in errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: String| TailorError::corrupt(origin, reason);
        if bytes.len() < 8 {
            return Err(corrupt(format!("{} bytes is shorter than the length prefix", bytes.len())));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let header_end = 8u64
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| corrupt(format!("header length {header_len} exceeds file")))?
            as usize;
        let raw: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| corrupt(format!("bad header: {e}")))?;
        let payload = &bytes[header_end..];

        let mut spans = Vec::with_capacity(raw.len());
        let mut tensors = BTreeMap::new();
        for (name, value) in raw {
            if name == METADATA_KEY {
                continue;
            }
            let entry: HeaderEntry = serde_json::from_value(value)
                .map_err(|e| corrupt(format!("bad header entry `{name}`: {e}")))?;
            let [begin, end] = entry.data_offsets;
            let numel: usize = entry.shape.iter().product();
            if end < begin || end - begin != (numel * entry.dtype.size()) as u64 {
                return Err(corrupt(format!(
                    "tensor `{name}`: byte range {begin}..{end} does not fit shape {:?}",
                    entry.shape
                )));
            }
            if end > payload.len() as u64 {
                return Err(corrupt(format!(
                    "tensor `{name}` ends at {end}, payload has {} bytes",
                    payload.len()
                )));
            }
            spans.push((begin, end, name.clone()));
            tensors.insert(
                name,
                TensorEntry {
                    dtype: entry.dtype,
                    shape: entry.shape,
                    data: payload[begin as usize..end as usize].to_vec(),
                },
            );
        }

        spans.sort();
        let mut cursor = 0u64;
        for (begin, end, name) in &spans {
            if *begin != cursor {
                return Err(corrupt(format!(
                    "tensor `{name}` starts at {begin}, expected {cursor}"
                )));
            }
            cursor = *end;
        }
        if cursor != payload.len() as u64 {
            return Err(corrupt(format!(
                "payload is {} bytes but tensors cover {cursor}",
                payload.len()
            )));
        }
        Ok(TensorContainer { tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| TailorError::storage(path, e))
    }
}

fn header_json<'a>(entries: impl Iterator<Item = (&'a str, Dtype, &'a [usize])>) -> Vec<u8> {
    let mut header = BTreeMap::new();
    let mut offset = 0u64;
    for (name, dtype, shape) in entries {
        let len = (shape.iter().product::<usize>() * dtype.size()) as u64;
        header.insert(
            name,
            HeaderEntry {
                data_offsets: [offset, offset + len],
                dtype,
                shape: shape.to_vec(),
            },
        );
        offset += len;
    }
    serde_json::to_vec(&header).expect("header serializes")
}

/// Exact on-disk size of a container holding the given tensors, without
/// materializing any payload. Entries must be in lexicographic name order.
pub fn container_size<'a>(entries: impl IntoIterator<Item = (&'a str, Dtype, &'a [usize])>) -> u64 {
    let entries: Vec<_> = entries.into_iter().collect();
    let payload: usize = entries
        .iter()
        .map(|(_, d, s)| s.iter().product::<usize>() * d.size())
        .sum();
    let header = header_json(entries.into_iter());
    (8 + header.len() + payload) as u64
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            TailorError::MissingArtifact(path.to_path_buf())
        } else {
            TailorError::storage(path, e)
        }
    })
}
