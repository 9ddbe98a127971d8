//! Binary tensor container.
//!
//! Layout (little-endian): `u64` header length, UTF-8 JSON header, then the
//! raw bytes of every tensor back to back in header order. Offsets in the
//! header are relative to the start of the data section.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::{Precision, Scalar, Tensor};

const FORMAT: &str = "calilab-tensors";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Precision,
    pub offset: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    /// Namespace of the tensors: `base` or `adapter`.
    namespace: String,
    config: Value,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// A decoded container; tensor bytes are kept raw until typed access.
#[derive(Debug, Clone)]
pub struct CheckpointFile {
    pub namespace: String,
    pub config: Value,
    pub meta: Value,
    pub entries: Vec<TensorEntry>,
    data: Vec<u8>,
}

impl CheckpointFile {
    pub fn tensor<S: Scalar>(&self, entry: &TensorEntry) -> Result<Tensor<S>> {
        if entry.dtype != S::PRECISION {
            return Err(Error::Checkpoint(format!(
                "tensor {} stored as {:?}, requested {:?}",
                entry.name,
                entry.dtype,
                S::PRECISION
            )));
        }
        let len: usize = entry.shape.iter().product();
        let end = entry.offset + len * S::BYTES;
        let bytes = self
            .data
            .get(entry.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} truncated", entry.name)))?;
        let values = bytes.chunks_exact(S::BYTES).map(S::read_le).collect();
        Tensor::new(entry.shape.clone(), values)
    }

    pub fn tensors<S: Scalar>(&self) -> Result<Vec<(TensorEntry, Tensor<S>)>> {
        self.entries
            .iter()
            .map(|e| Ok((e.clone(), self.tensor(e)?)))
            .collect()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Checkpoint("file shorter than its length prefix".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header_bytes = bytes
            .get(8..8 + header_len)
            .ok_or_else(|| Error::Checkpoint("header truncated".into()))?;
        let header: Header = serde_json::from_slice(header_bytes)?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container {} v{}",
                header.format, header.version
            )));
        }
        Ok(CheckpointFile {
            namespace: header.namespace,
            config: header.config,
            meta: header.meta,
            entries: header.tensors,
            data: bytes[8 + header_len..].to_vec(),
        })
    }
}

/// Serialises `tensors` (name, tensor, frozen) in the given order.
pub fn encode_checkpoint<S: Scalar>(
    namespace: &str,
    config: Value,
    meta: Value,
    tensors: &[(&str, &Tensor<S>, bool)],
) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut data = Vec::new();
    for &(name, t, frozen) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: S::PRECISION,
            offset: data.len(),
            frozen,
        });
        for &x in t.data() {
            x.write_le(&mut data);
        }
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        namespace: namespace.into(),
        config,
        meta,
        tensors: entries,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header.len() + data.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn write_checkpoint<S: Scalar>(
    path: &Path,
    namespace: &str,
    config: Value,
    meta: Value,
    tensors: &[(&str, &Tensor<S>, bool)],
) -> Result<()> {
    let bytes = encode_checkpoint(namespace, config, meta, tensors)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let bytes = std::fs::read(path)?;
    CheckpointFile::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let a = Tensor::<f32>::from_f64([2, 2], &[1.5, -0.0, f64::MIN_POSITIVE, 3.25]).unwrap();
        let b = Tensor::<f32>::from_f64([3], &[7.0, 8.0, 9.0]).unwrap();
        let bytes = encode_checkpoint(
            "base",
            serde_json::json!({"d": 2}),
            serde_json::json!({}),
            &[("a", &a, true), ("b", &b, false)],
        )
        .unwrap();
        let file = CheckpointFile::decode(&bytes).unwrap();
        let back = file.tensors::<f32>().unwrap();
        assert_eq!(back[0].1, a);
        assert!(back[0].0.frozen);
        assert_eq!(back[1].1, b);
        assert!(file.tensor::<f64>(&back[0].0).is_err());
        let again = encode_checkpoint(
            "base",
            file.config.clone(),
            file.meta.clone(),
            &[("a", &back[0].1, true), ("b", &back[1].1, false)],
        )
        .unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncated_input_errors() {
        assert!(CheckpointFile::decode(&[1, 2, 3]).is_err());
        assert!(CheckpointFile::decode(&[200, 0, 0, 0, 0, 0, 0, 0, b'{']).is_err());
    }
}
