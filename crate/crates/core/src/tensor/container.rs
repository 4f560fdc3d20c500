//! Binary tensor container used for checkpoints and datasets.
//!
//! Layout: the 8-byte magic `LSATENS1`, a little-endian `u64` manifest
//! length, the JSON manifest, then the raw little-endian payloads back to
//! back in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DType, Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LSATENS1";

/// Manifest entry describing one payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    #[serde(default)]
    pub decay_exempt: bool,
    #[serde(default = "default_true")]
    pub trainable: bool,
    pub offset: u64,
    pub nbytes: u64,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    entries: Vec<TensorRecord>,
}

/// One named tensor together with its raw payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainerEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub decay_exempt: bool,
    pub trainable: bool,
    pub payload: Vec<u8>,
}

impl ContainerEntry {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut payload = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &x in t.data() {
            x.write_le(&mut payload);
        }
        ContainerEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            decay_exempt: false,
            trainable: true,
            payload,
        }
    }

    pub fn with_flags(mut self, decay_exempt: bool, trainable: bool) -> Self {
        self.decay_exempt = decay_exempt;
        self.trainable = trainable;
        self
    }

    /// Decodes the payload, converting between element types if needed.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let width = self.dtype.size();
        let data: Vec<T> = match self.dtype {
            d if d == T::DTYPE => self.payload.chunks_exact(width).map(T::read_le).collect(),
            DType::F32 => self
                .payload
                .chunks_exact(width)
                .map(|c| T::of(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => self
                .payload
                .chunks_exact(width)
                .map(|c| T::of(f64::read_le(c)))
                .collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }
}

pub fn write_container(path: &Path, entries: &[ContainerEntry]) -> Result<()> {
    let mut offset = 0u64;
    let records: Vec<TensorRecord> = entries
        .iter()
        .map(|e| {
            let r = TensorRecord {
                name: e.name.clone(),
                shape: e.shape.clone(),
                dtype: e.dtype,
                decay_exempt: e.decay_exempt,
                trainable: e.trainable,
                offset,
                nbytes: e.payload.len() as u64,
            };
            offset += e.payload.len() as u64;
            r
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        format: "lsamesh-tensors".into(),
        version: 1,
        entries: records,
    })?;
    let mut bytes = Vec::with_capacity(16 + manifest.len() + offset as usize);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest);
    for e in entries {
        bytes.extend_from_slice(&e.payload);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Vec<ContainerEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format(format!("{} is not a tensor container", path.display())));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = 16usize
        .checked_add(mlen)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format("manifest length exceeds file size".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..body_start])?;
    let body = &bytes[body_start..];
    manifest
        .entries
        .into_iter()
        .map(|r| {
            let start = r.offset as usize;
            let end = start + r.nbytes as usize;
            let expected = r.shape.iter().product::<usize>() * r.dtype.size();
            if end > body.len() || expected != r.nbytes as usize {
                return Err(Error::Format(format!("payload of {:?} is inconsistent", r.name)));
            }
            Ok(ContainerEntry {
                name: r.name,
                shape: r.shape,
                dtype: r.dtype,
                decay_exempt: r.decay_exempt,
                trainable: r.trainable,
                payload: body[start..end].to_vec(),
            })
        })
        .collect()
}

/// Reads only the JSON manifest of a container.
pub fn read_manifest(path: &Path) -> Result<Vec<TensorRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format(format!("{} is not a tensor container", path.display())));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = (16 + mlen).min(bytes.len());
    let manifest: Manifest = serde_json::from_slice(&bytes[16..end])?;
    Ok(manifest.entries)
}
