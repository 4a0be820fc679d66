//! Checkpoint files: a JSON manifest of parameter names and shapes plus a
//! blob of little-endian `f64` values in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Array;
use crate::error::{LadError, Result};

pub const CHECKPOINT_FORMAT: &str = "lad-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub tool_version: String,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub num_scalars: usize,
    pub params: Vec<ManifestEntry>,
    /// Free-form metadata (model and run configuration).
    pub meta: serde_json::Value,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes via temporary files and renames so an interrupted write leaves
/// any previous checkpoint intact.
pub fn save_checkpoint(manifest_path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let blob = blob_path(manifest_path);
    let mut bytes = Vec::with_capacity(store.num_scalars() * 8);
    let mut params = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        params.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        });
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        tool_version: crate::VERSION.into(),
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        num_scalars: store.num_scalars(),
        params,
        meta,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| LadError::json(manifest_path, e))?;
    write_atomic(&blob, &bytes)?;
    write_atomic(manifest_path, text.as_bytes())
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<(ParamStore, CheckpointManifest)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| LadError::io(manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| LadError::json(manifest_path, e))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(LadError::Incompatible(format!(
            "checkpoint format {} (expected {CHECKPOINT_FORMAT})",
            manifest.format
        )));
    }
    let blob = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| LadError::io(&blob, e))?;
    let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if bytes.len() != expected * 8 {
        return Err(LadError::Incompatible(format!(
            "blob holds {} bytes, manifest describes {} values",
            bytes.len(),
            expected
        )));
    }
    let mut store = ParamStore::new();
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for entry in &manifest.params {
        let n = entry.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        store.add(entry.name.clone(), Array::new(entry.shape.clone(), data)?)?;
    }
    Ok((store, manifest))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LadError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| LadError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LadError::io(path, e))
}
