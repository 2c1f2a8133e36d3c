//! Tensor container: an 8-byte little-endian header length, a JSON header
//! listing `{name, shape, offset}` per tensor, then the raw little-endian
//! `f32` payload. Offsets are in bytes from the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    metadata: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub metadata: Value,
    pub tensors: ParamStore,
}

impl Container {
    pub fn new(metadata: Value, tensors: ParamStore) -> Self {
        Self { metadata, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in self.tensors.iter() {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.numel() as u64;
        }
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.tensors.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 {
            return Err(bad("file shorter than the length prefix"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let payload_start = 8usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&bytes[8..payload_start])?;
        let payload = &bytes[payload_start..];
        let mut tensors = ParamStore::new();
        let mut expected_offset = 0u64;
        for entry in header.tensors {
            if entry.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "tensor {} at offset {} but {} expected",
                    entry.name, entry.offset, expected_offset
                )));
            }
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * numel;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} runs past the end of the payload",
                    entry.name
                )));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors.contains(&entry.name) {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", entry.name)));
            }
            tensors.insert(entry.name, Tensor::new(entry.shape, data)?);
            expected_offset = end as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }
}

/// Check that `loaded` has exactly the names and shapes of `reference`.
pub fn validate_shapes(loaded: &ParamStore, reference: &ParamStore) -> Result<()> {
    for (name, t) in reference.iter() {
        match loaded.get(name) {
            None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            Some(l) if l.shape() != t.shape() => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?}, config expects {:?}",
                    l.shape(),
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = loaded.names().find(|n| !reference.contains(n)) {
        return Err(Error::Checkpoint(format!(
            "parameter {extra} is not part of the configured model"
        )));
    }
    Ok(())
}
