//! Single-file checkpoint container.
//!
//! Layout: magic `PLM1`, format version (u32 LE), metadata length (u64 LE),
//! UTF-8 JSON metadata, then the raw tensor blobs as little-endian f32 in
//! metadata order. The metadata records tensor names and shapes, the dtype,
//! the fully resolved config, and which pipeline stage wrote the file.
//! Loading and re-saving a checkpoint reproduces it byte for byte.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"PLM1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub tensors: Vec<TensorEntry>,
    pub dtype: String,
    /// Resolved flat experiment config at write time.
    pub config: BTreeMap<String, String>,
    /// Pipeline stage that produced the file.
    pub stage: String,
    /// Free-form provenance (objective traces, fingerprints, ...).
    pub extra: BTreeMap<String, String>,
}

/// An in-memory checkpoint: ordered named tensors plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub config: BTreeMap<String, String>,
    pub extra: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, config: BTreeMap<String, String>) -> Self {
        Checkpoint {
            stage: stage.into(),
            config,
            extra: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::checkpoint(format!("duplicate tensor name {name:?}")));
        }
        // Checkpoints hold plain data; gradient flags are a runtime concern.
        self.tensors.push((name, tensor.with_requires_grad(false)));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::checkpoint(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn tensor_names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            dtype: "f32".to_string(),
            config: self.config.clone(),
            stage: self.stage.clone(),
            extra: self.extra.clone(),
        }
    }

    /// Copy a named tensor's data into `dst`, checking shapes.
    pub fn load_into(&self, name: &str, dst: &mut Tensor<f32>) -> Result<()> {
        let src = self.get(name)?;
        if src.shape() != dst.shape() {
            return Err(Error::checkpoint(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(src.data());
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta_json = serde_json::to_vec(&self.meta())
            .map_err(|e| Error::checkpoint(format!("cannot encode metadata: {e}")))?;
        let blob_len: usize = self.tensors.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(16 + meta_json.len() + blob_len);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta_json);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut cursor, &mut magic)?;
        if magic != MAGIC {
            return Err(Error::checkpoint(format!(
                "bad magic {magic:?}, not a checkpoint file"
            )));
        }
        let mut word = [0u8; 4];
        read_exact(&mut cursor, &mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let mut len_bytes = [0u8; 8];
        read_exact(&mut cursor, &mut len_bytes)?;
        let meta_len = u64::from_le_bytes(len_bytes) as usize;
        if cursor.len() < meta_len {
            return Err(Error::checkpoint("metadata is truncated"));
        }
        let (meta_bytes, rest) = cursor.split_at(meta_len);
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::checkpoint(format!("bad metadata: {e}")))?;
        if meta.dtype != "f32" {
            return Err(Error::checkpoint(format!(
                "unsupported dtype {:?}",
                meta.dtype
            )));
        }
        let expected: usize = meta
            .tensors
            .iter()
            .map(|e| e.shape.iter().product::<usize>() * 4)
            .sum();
        if rest.len() != expected {
            return Err(Error::checkpoint(format!(
                "tensor data is {} bytes, metadata promises {expected}",
                rest.len()
            )));
        }
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        let mut offset = 0;
        for entry in &meta.tensors {
            let numel: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for chunk in rest[offset..offset + numel * 4].chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            offset += numel * 4;
            tensors.push((entry.name.clone(), Tensor::from_vec(&entry.shape, data)?));
        }
        Ok(Checkpoint {
            stage: meta.stage,
            config: meta.config,
            extra: meta.extra,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut file = std::fs::File::create(path).map_err(|e| {
            Error::checkpoint(format!("cannot create {}: {e}", path.display()))
        })?;
        file.write_all(&bytes)
            .map_err(|e| Error::checkpoint(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(cursor: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if cursor.len() < buf.len() {
        return Err(Error::checkpoint("checkpoint file is truncated"));
    }
    let (head, tail) = cursor.split_at(buf.len());
    buf.copy_from_slice(head);
    *cursor = tail;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
