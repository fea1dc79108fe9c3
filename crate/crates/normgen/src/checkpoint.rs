//! On-disk checkpoint format shared by the LM and the classifier:
//! `manifest.json` describing the tensor directory plus `weights.bin`
//! holding raw little-endian values concatenated in manifest order.

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: String,
    pub hyperparams: serde_json::Value,
    pub vocab_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    params: &ParameterSet,
    kind: &str,
    hyperparams: serde_json::Value,
    vocab_sha256: &str,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    for (name, p) in params.iter() {
        let offset = blob.len() as u64;
        for v in &p.value.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            dtype: "f64".to_string(),
            shape: p.value.shape.clone(),
            offset,
            length: (p.value.len() * 8) as u64,
        });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        hyperparams,
        vocab_sha256: vocab_sha256.to_string(),
        tensors,
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let blob_path = dir.join("weights.bin");
    fs::write(&blob_path, blob).map_err(|e| Error::io(blob_path.display().to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParameterSet, Manifest)> {
    let manifest_path = dir.join("manifest.json");
    let json = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unknown checkpoint version {} (expected {})",
            manifest.version, CHECKPOINT_VERSION
        )));
    }
    let blob_path = dir.join("weights.bin");
    let blob = fs::read(&blob_path).map_err(|e| Error::io(blob_path.display().to_string(), e))?;

    let mut params = ParameterSet::new();
    for entry in &manifest.tensors {
        let elem_size = match entry.dtype.as_str() {
            "f64" => 8,
            "f32" => 4,
            other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
        };
        let n: usize = entry.shape.iter().product();
        if entry.length as usize != n * elem_size
            || (entry.offset + entry.length) as usize > blob.len()
        {
            return Err(Error::Checkpoint(format!(
                "tensor {} extent inconsistent with blob size {}",
                entry.name,
                blob.len()
            )));
        }
        let bytes = &blob[entry.offset as usize..(entry.offset + entry.length) as usize];
        let data: Vec<f64> = match elem_size {
            8 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            _ => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        params.insert(&entry.name, Tensor::from_vec(&entry.shape, data)?);
    }
    Ok((params, manifest))
}
