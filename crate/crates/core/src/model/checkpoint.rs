//! Checkpoints: a JSON manifest (config, tensor names, shapes, dtype, byte
//! offsets) next to one little-endian blob. Loading reproduces every value
//! bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{TransformerConfig, TransformerParams, ATTENTION_REDUCTION};
use crate::error::{MimuError, Result};
use crate::hashing::sha256_hex;
use crate::real::Real;

pub const CHECKPOINT_FORMAT: &str = "mimu-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: TransformerConfig,
    pub dtype: String,
    pub attention_reduction: String,
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`.
pub fn save_checkpoint<F: Real>(
    params: &TransformerParams<F>,
    dir: &Path,
    stem: &str,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| MimuError::io(dir, e))?;
    let (json_path, blob_path) = paths(dir, stem);
    let mut blob = Vec::with_capacity(params.num_parameters() * F::BYTES);
    let mut tensors = Vec::new();
    for (name, t) in params.named() {
        let offset = blob.len();
        for &v in &t.data {
            v.write_le(&mut blob);
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape.clone(),
            offset,
            nbytes: blob.len() - offset,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        config: params.config.clone(),
        dtype: F::DTYPE.into(),
        attention_reduction: ATTENTION_REDUCTION.into(),
        blob: blob_path
            .file_name()
            .expect("file name")
            .to_string_lossy()
            .into_owned(),
        blob_sha256: sha256_hex(&blob),
        tensors,
    };
    fs::write(&blob_path, &blob).map_err(|e| MimuError::io(&blob_path, e))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json_path, json).map_err(|e| MimuError::io(&json_path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint<F: Real>(dir: &Path, stem: &str) -> Result<TransformerParams<F>> {
    let (json_path, _) = paths(dir, stem);
    let text = fs::read_to_string(&json_path).map_err(|e| MimuError::io(&json_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| MimuError::format(&json_path, e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(MimuError::format(&json_path, format!("unknown format {}", manifest.format)));
    }
    if manifest.dtype != F::DTYPE {
        return Err(MimuError::format(
            &json_path,
            format!("stored as {}, requested {}", manifest.dtype, F::DTYPE),
        ));
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| MimuError::io(&blob_path, e))?;
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(MimuError::format(&blob_path, "blob hash mismatch"));
    }

    let mut params = TransformerParams::<F>::zeros(&manifest.config)?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    if names.len() != manifest.tensors.len() {
        return Err(MimuError::format(&json_path, "tensor count does not match the config"));
    }
    for ((tensor, name), entry) in params.tensors_mut().into_iter().zip(&names).zip(&manifest.tensors) {
        if &entry.name != name || entry.shape != tensor.shape {
            return Err(MimuError::format(
                &json_path,
                format!("tensor `{}` does not match expected `{name}`", entry.name),
            ));
        }
        let end = entry.offset + entry.nbytes;
        if entry.nbytes != tensor.len() * F::BYTES || end > blob.len() {
            return Err(MimuError::format(&blob_path, format!("bad extent for `{name}`")));
        }
        for (v, chunk) in tensor
            .data
            .iter_mut()
            .zip(blob[entry.offset..end].chunks_exact(F::BYTES))
        {
            *v = F::read_le(chunk);
        }
    }
    Ok(params)
}
