//! On-disk tensor checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` (tensor names, shapes,
//! dtype, byte order and byte offsets, plus free-form metadata) and
//! `weights.bin` (the tensors concatenated as row-major little-endian f32).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const FORMAT_NAME: &str = "roomdiff-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_order: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint {
            path: PathBuf::new(),
            message: format!("missing tensor `{name}`"),
        })
    }
}

/// Write tensors and metadata to `dir`, returning the checkpoint content hash.
pub fn save(dir: &Path, tensors: &[(String, Tensor)], metadata: serde_json::Value) -> Result<String> {
    fs::create_dir_all(dir)?;
    let mut bytes: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, tensor) in tensors {
        let values = tensor.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let offset = bytes.len() as u64;
        for v in &values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.dims().to_vec(),
            dtype: "f32".into(),
            byte_order: "little".into(),
            offset,
            length: (values.len() * 4) as u64,
        });
    }
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: 1,
        tensors: entries,
        metadata,
    };
    let manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    fs::write(dir.join(WEIGHTS_FILE), &bytes)?;
    fs::write(dir.join(MANIFEST_FILE), &manifest_bytes)?;
    Ok(hash_bytes(&manifest_bytes, &bytes))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let err = |message: String| Error::Checkpoint {
        path: dir.to_path_buf(),
        message,
    };
    let manifest_bytes = fs::read(dir.join(MANIFEST_FILE)).map_err(|e| err(format!("reading manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.format != FORMAT_NAME {
        return Err(err(format!("unexpected format `{}`", manifest.format)));
    }
    let bytes = fs::read(dir.join(WEIGHTS_FILE)).map_err(|e| err(format!("reading weights: {e}")))?;
    let mut tensors = BTreeMap::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" || entry.byte_order != "little" {
            return Err(err(format!("tensor `{}` has unsupported encoding", entry.name)));
        }
        let start = entry.offset as usize;
        let end = start + entry.length as usize;
        let count: usize = entry.shape.iter().product();
        if end > bytes.len() || count * 4 != entry.length as usize {
            return Err(err(format!("tensor `{}` is out of bounds", entry.name)));
        }
        let values: Vec<f32> = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::from_vec(values, entry.shape.as_slice(), &Device::Cpu)?;
        tensors.insert(entry.name.clone(), tensor);
    }
    Ok(Checkpoint {
        tensors,
        metadata: manifest.metadata,
    })
}

pub fn exists(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).is_file() && dir.join(WEIGHTS_FILE).is_file()
}

/// Hash of an existing checkpoint directory (same value `save` returned).
pub fn content_hash(dir: &Path) -> Result<String> {
    let manifest = fs::read(dir.join(MANIFEST_FILE))?;
    let weights = fs::read(dir.join(WEIGHTS_FILE))?;
    Ok(hash_bytes(&manifest, &weights))
}

fn hash_bytes(manifest: &[u8], weights: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(manifest);
    hasher.update(weights);
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::new(&[[1.5f32, -2.0, 3.25], [0.0, 1e-7, -0.5]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[42f32], &Device::Cpu).unwrap();
        let meta = serde_json::json!({"kind": "probe"});
        let h1 = save(dir.path(), &[("a".into(), a.clone()), ("b".into(), b)], meta.clone()).unwrap();
        assert_eq!(h1, content_hash(dir.path()).unwrap());

        let manifest: Manifest =
            serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(manifest.tensors[0].offset, 0);
        assert_eq!(manifest.tensors[0].length, 24);
        assert_eq!(manifest.tensors[1].offset, 24);
        let raw = fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        assert_eq!(&raw[0..4], &1.5f32.to_le_bytes());

        let ck = load(dir.path()).unwrap();
        assert_eq!(ck.metadata, meta);
        assert_eq!(ck.tensors["a"].to_vec2::<f32>().unwrap(), a.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap();
        save(dir.path(), &[("a".into(), a)], serde_json::Value::Null).unwrap();
        fs::write(dir.path().join(WEIGHTS_FILE), [0u8; 4]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint { .. })));
    }
}
