//! Parameter files: a flat little-endian blob plus a JSON manifest naming each
//! tensor's shape, byte offset and dtype.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::io::{write_atomic, IoError};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub blob: String,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

/// Writes `<base>.bin` and `<base>.json`.
pub fn save_checkpoint<T: Scalar>(
    base: &Path,
    tensors: &[(String, &Tensor<T>)],
    meta: serde_json::Value,
) -> Result<CheckpointManifest, IoError> {
    let (json_path, bin_path) = paths(base);
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
            dtype: T::DTYPE.to_string(),
        });
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    let manifest = CheckpointManifest {
        blob: bin_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        entries,
        meta,
    };
    write_atomic(&bin_path, &blob)?;
    let text = serde_json::to_vec_pretty(&manifest).map_err(|e| IoError::Format(e.to_string()))?;
    write_atomic(&json_path, &text)?;
    Ok(manifest)
}

pub fn load_checkpoint<T: Scalar>(base: &Path) -> Result<(CheckpointManifest, Vec<Tensor<T>>), IoError> {
    let (json_path, bin_path) = paths(base);
    let text = std::fs::read(&json_path).map_err(|e| IoError::Io(json_path.display().to_string(), e))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&text).map_err(|e| IoError::Format(e.to_string()))?;
    let blob = std::fs::read(&bin_path).map_err(|e| IoError::Io(bin_path.display().to_string(), e))?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        if e.dtype != T::DTYPE {
            return Err(IoError::Format(format!(
                "{}: dtype {} does not match {}",
                e.name,
                e.dtype,
                T::DTYPE
            )));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * T::BYTES;
        if end > blob.len() {
            return Err(IoError::Format(format!("{}: blob too short", e.name)));
        }
        let data = blob[e.offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push(Tensor::new(&e.shape, data).map_err(|err| IoError::Format(err.to_string()))?);
    }
    Ok((manifest, out))
}
