//! Model checkpoints: a JSON manifest next to a little-endian f32 blob.
//!
//! The manifest `<path>` lists the model configuration and every parameter
//! array (sorted by name) with its shape; `<path>.bin` holds the values as
//! consecutive little-endian f32 in manifest order. Values round to f32 on
//! save, so a save -> load -> save cycle is byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{CheckpointError, Error, Result};
use crate::params::ParamSet;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Blob file sitting next to the manifest: `<manifest>.bin`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    let mut os = manifest.as_os_str().to_os_string();
    os.push(".bin");
    PathBuf::from(os)
}

pub fn save(path: &Path, model_config: &serde_json::Value, params: &ParamSet) -> Result<()> {
    let mut named: Vec<(&str, &Tensor)> =
        params.iter().map(|(_, name, value)| (name, value)).collect();
    named.sort_by_key(|(name, _)| name.to_string());

    let arrays = named
        .iter()
        .map(|(name, value)| ArrayEntry {
            name: name.to_string(),
            rows: value.rows(),
            cols: value.cols(),
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model_config.clone(),
        arrays,
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))?;

    let mut blob = Vec::new();
    for (_, value) in &named {
        for r in 0..value.rows() {
            for c in 0..value.cols() {
                blob.extend_from_slice(&(value.get(r, c) as f32).to_le_bytes());
            }
        }
    }
    let bp = blob_path(path);
    std::fs::write(&bp, blob).map_err(|e| Error::io(bp.display().to_string(), e))?;
    Ok(())
}

#[derive(Debug)]
pub struct Loaded {
    pub config: serde_json::Value,
    pub arrays: BTreeMap<String, Tensor>,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let bp = blob_path(path);
    let blob = std::fs::read(&bp).map_err(|e| Error::io(bp.display().to_string(), e))?;
    let total: usize = manifest.arrays.iter().map(|a| a.rows * a.cols).sum();
    let need = total * 4;
    if blob.len() < need {
        return Err(CheckpointError::TruncatedBlob { need, found: blob.len() }.into());
    }
    if blob.len() > need {
        return Err(CheckpointError::Manifest(format!(
            "blob has {} trailing bytes beyond the {} the manifest describes",
            blob.len() - need,
            need
        ))
        .into());
    }

    let mut arrays = BTreeMap::new();
    let mut cursor = 0usize;
    for entry in &manifest.arrays {
        let count = entry.rows * entry.cols;
        let data: Vec<f64> = blob[cursor..cursor + count * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        cursor += count * 4;
        if arrays
            .insert(entry.name.clone(), Tensor::from_vec(entry.rows, entry.cols, data))
            .is_some()
        {
            return Err(
                CheckpointError::Manifest(format!("duplicate array {}", entry.name)).into()
            );
        }
    }
    Ok(Loaded { config: manifest.model, arrays })
}

/// Copy checkpoint values into an existing parameter set, validating that
/// names and shapes match exactly (both directions).
pub fn apply(params: &mut ParamSet, loaded: &Loaded) -> Result<()> {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let current = params.get(id);
        let stored = loaded
            .arrays
            .get(&name)
            .ok_or_else(|| CheckpointError::MissingArray { name: name.clone() })?;
        if stored.shape() != current.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                found_rows: stored.rows(),
                found_cols: stored.cols(),
                want_rows: current.rows(),
                want_cols: current.cols(),
            }
            .into());
        }
        *params.get_mut(id) = stored.clone();
    }
    for name in loaded.arrays.keys() {
        if params.id_of(name).is_none() {
            return Err(CheckpointError::Manifest(format!(
                "checkpoint contains unknown array {name}"
            ))
            .into());
        }
    }
    Ok(())
}
