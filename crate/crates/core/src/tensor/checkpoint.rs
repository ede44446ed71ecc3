//! Checkpoint container: a JSON manifest plus a sidecar blob of
//! little-endian f64 values concatenated in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const FORMAT: &str = "jd-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub metadata: serde_json::Value,
    pub entries: Vec<ManifestEntry>,
}

/// Tensors in manifest order plus free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str, path: &Path) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("missing entry {name:?}"),
        })
    }
}

/// Blob path written next to `manifest_path`: `x.json` -> `x.bin`.
pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

pub fn save(manifest_path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let blob = blob_path(manifest_path);
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    for (name, t) in &ckpt.tensors {
        let offset = bytes.len() as u64;
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            byte_offset: offset,
            byte_length: bytes.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        metadata: ckpt.metadata.clone(),
        entries,
    };
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

pub fn load(manifest_path: &Path) -> Result<Checkpoint> {
    let corrupt = |reason: String| Error::Checkpoint {
        path: manifest_path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(format!("bad manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(corrupt(format!("unknown format {:?}", manifest.format)));
    }
    let blob = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mut tensors = Vec::with_capacity(manifest.entries.len());
    let mut expected_offset = 0u64;
    for e in &manifest.entries {
        if e.dtype != "f64" {
            return Err(corrupt(format!("{}: unsupported dtype {:?}", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.byte_length != numel as u64 * 8 {
            return Err(corrupt(format!(
                "{}: byte_length {} does not match shape {:?}",
                e.name, e.byte_length, e.shape
            )));
        }
        if e.byte_offset != expected_offset {
            return Err(corrupt(format!(
                "{}: byte_offset {} breaks manifest order (expected {expected_offset})",
                e.name, e.byte_offset
            )));
        }
        let end = e.byte_offset + e.byte_length;
        if end > bytes.len() as u64 {
            return Err(corrupt(format!("{}: blob truncated", e.name)));
        }
        let slice = &bytes[e.byte_offset as usize..end as usize];
        let data = slice
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        expected_offset = end;
    }
    if expected_offset != bytes.len() as u64 {
        return Err(corrupt(format!(
            "blob has {} trailing bytes",
            bytes.len() as u64 - expected_offset
        )));
    }
    Ok(Checkpoint {
        metadata: manifest.metadata,
        tensors,
    })
}
