//! Checkpoints: a JSON manifest (name, shape, byte offset per tensor) next to
//! a little-endian `f64` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "favla-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes `ps` to `manifest_path` and a sibling `.bin` blob.
pub fn save_checkpoint(
    ps: &ParamStore,
    manifest_path: &Path,
    meta: serde_json::Value,
) -> Result<()> {
    let blob_name = manifest_path
        .with_extension("bin")
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Invalid(format!("bad checkpoint path {}", manifest_path.display())))?
        .to_string();
    let mut blob = Vec::with_capacity(ps.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(ps.len());
    for p in ps.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        blob: blob_name.clone(),
        tensors,
        meta,
    };
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let blob_path = manifest_path.with_file_name(&blob_name);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

pub fn read_manifest(manifest_path: &Path) -> Result<CheckpointManifest> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(manifest_path, e))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(
            manifest_path,
            format!("unsupported format {}", manifest.format),
        ));
    }
    Ok(manifest)
}

/// Loads values into an already-built store, validating that names and
/// shapes match exactly. Returns the manifest's `meta` section.
pub fn load_checkpoint(ps: &mut ParamStore, manifest_path: &Path) -> Result<serde_json::Value> {
    let manifest = read_manifest(manifest_path)?;
    let blob_path = manifest_path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if manifest.tensors.len() != ps.len() {
        return Err(Error::format(
            manifest_path,
            format!(
                "checkpoint has {} tensors, model expects {}",
                manifest.tensors.len(),
                ps.len()
            ),
        ));
    }
    for entry in &manifest.tensors {
        let id = ps
            .id(&entry.name)
            .map_err(|_| Error::format(manifest_path, format!("unexpected tensor {}", entry.name)))?;
        let expected = ps.value(id).shape().to_vec();
        if expected != entry.shape {
            return Err(Error::shape(
                &entry.name,
                format!("{:?}", expected),
                format!("{:?}", entry.shape),
            ));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        if end > blob.len() {
            return Err(Error::format(&blob_path, format!("{} out of range", entry.name)));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        *ps.value_mut(id) = Tensor::from_vec(&entry.shape, data)?;
    }
    Ok(manifest.meta)
}
