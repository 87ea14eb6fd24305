//! On-disk bundle format.
//!
//! `manifest.json` describes the bundle; every split is one flat
//! little-endian file holding all features row-major (`u8` pixels or `u16`
//! tokens) followed by one label byte per example. Cue records live in a
//! sibling `<split>.cues.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BundleMeta, CueRecord, DatasetBundle, Example, Features, InputShape, Region};
use crate::error::{MimuError, Result};
use crate::hashing::sha256_hex;

pub const BUNDLE_FORMAT: &str = "mimu-bundle/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitLayout {
    pub name: String,
    pub file: String,
    pub cues_file: String,
    pub count: usize,
    /// `u8` or `u16le`.
    pub feature_dtype: String,
    pub features_per_example: usize,
    pub label_offset: usize,
    pub total_bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    pub layout: String,
    pub meta: BundleMeta,
    pub splits: Vec<SplitLayout>,
    /// Hash over the split hashes in manifest order.
    pub bundle_hash: String,
    /// Provenance of the command that wrote the bundle, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct CueEntry {
    object: Option<Region>,
    cues: Vec<CueRecord>,
}

fn encode_split(split: &[Example], shape: &InputShape) -> Result<Vec<u8>> {
    let per = shape.feature_len();
    let width = match shape {
        InputShape::Image { .. } => 1,
        InputShape::Tokens { .. } => 2,
    };
    let mut out = Vec::with_capacity(split.len() * (per * width + 1));
    for (i, ex) in split.iter().enumerate() {
        match (&ex.features, shape) {
            (Features::Image(px), InputShape::Image { .. }) if px.len() == per => {
                out.extend_from_slice(px)
            }
            (Features::Tokens(tok), InputShape::Tokens { .. }) if tok.len() == per => {
                for t in tok {
                    out.extend_from_slice(&t.to_le_bytes());
                }
            }
            _ => {
                return Err(MimuError::InvalidInput(format!(
                    "example {i} does not match the bundle input shape"
                )))
            }
        }
    }
    for ex in split {
        let label = u8::try_from(ex.label)
            .map_err(|_| MimuError::InvalidInput(format!("label {} exceeds u8", ex.label)))?;
        out.push(label);
    }
    Ok(out)
}

/// The `bundle_hash` that [`save_bundle`] would record, computed in memory.
pub fn bundle_hash(bundle: &DatasetBundle) -> Result<String> {
    let mut joined = String::new();
    for (_, split) in bundle.eval_splits_with_train() {
        joined.push_str(&sha256_hex(&encode_split(split, &bundle.meta.input)?));
    }
    Ok(sha256_hex(joined.as_bytes()))
}

pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<BundleManifest> {
    fs::create_dir_all(dir).map_err(|e| MimuError::io(dir, e))?;
    let shape = bundle.meta.input;
    let (dtype, width) = match shape {
        InputShape::Image { .. } => ("u8", 1),
        InputShape::Tokens { .. } => ("u16le", 2),
    };
    let per = shape.feature_len();

    let mut splits = Vec::new();
    for (name, split) in bundle.eval_splits_with_train() {
        let bytes = encode_split(split, &shape)?;
        let file = format!("{name}.bin");
        let cues_file = format!("{name}.cues.json");
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| MimuError::io(&path, e))?;

        let entries: Vec<CueEntry> = split
            .iter()
            .map(|e| CueEntry {
                object: e.object,
                cues: e.cues.clone(),
            })
            .collect();
        let cue_path = dir.join(&cues_file);
        let cue_json = serde_json::to_vec(&entries).expect("cue records serialize");
        fs::write(&cue_path, cue_json).map_err(|e| MimuError::io(&cue_path, e))?;

        splits.push(SplitLayout {
            name: name.to_string(),
            file,
            cues_file,
            count: split.len(),
            feature_dtype: dtype.into(),
            features_per_example: per,
            label_offset: split.len() * per * width,
            total_bytes: bytes.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let joined: String = splits.iter().map(|s| s.sha256.as_str()).collect();
    let manifest = BundleManifest {
        format: BUNDLE_FORMAT.into(),
        layout: format!(
            "per split: {} features per example as {dtype} row-major (image H x W x C), \
             examples concatenated, then one u8 label per example starting at label_offset",
            per
        ),
        meta: bundle.meta.clone(),
        bundle_hash: sha256_hex(joined.as_bytes()),
        splits,
        run: None,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| MimuError::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<BundleManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| MimuError::io(&path, e))?;
    let manifest: BundleManifest =
        serde_json::from_str(&text).map_err(|e| MimuError::format(&path, e.to_string()))?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(MimuError::format(&path, format!("unknown format {}", manifest.format)));
    }
    Ok(manifest)
}

pub fn load_bundle(dir: &Path) -> Result<(DatasetBundle, BundleManifest)> {
    let manifest = load_manifest(dir)?;
    let shape = manifest.meta.input;
    let per = shape.feature_len();
    let mut train = None;
    let mut dev = None;
    let mut ood = BTreeMap::new();

    for s in &manifest.splits {
        let path = dir.join(&s.file);
        let bytes = fs::read(&path).map_err(|e| MimuError::io(&path, e))?;
        if sha256_hex(&bytes) != s.sha256 {
            return Err(MimuError::format(&path, "hash mismatch"));
        }
        let width = if s.feature_dtype == "u16le" { 2 } else { 1 };
        if s.features_per_example != per || bytes.len() != s.count * (per * width + 1) {
            return Err(MimuError::format(&path, "size does not match the manifest"));
        }
        let cue_path = dir.join(&s.cues_file);
        let cue_text = fs::read(&cue_path).map_err(|e| MimuError::io(&cue_path, e))?;
        let entries: Vec<CueEntry> = serde_json::from_slice(&cue_text)
            .map_err(|e| MimuError::format(&cue_path, e.to_string()))?;
        if entries.len() != s.count {
            return Err(MimuError::format(&cue_path, "cue record count mismatch"));
        }

        let labels = &bytes[s.label_offset..];
        let examples: Vec<Example> = entries
            .into_iter()
            .enumerate()
            .map(|(i, entry)| {
                let raw = &bytes[i * per * width..(i + 1) * per * width];
                let features = match shape {
                    InputShape::Image { .. } => Features::Image(raw.to_vec()),
                    InputShape::Tokens { .. } => Features::Tokens(
                        raw.chunks_exact(2)
                            .map(|c| u16::from_le_bytes([c[0], c[1]]))
                            .collect(),
                    ),
                };
                Example {
                    features,
                    label: labels[i] as usize,
                    cues: entry.cues,
                    object: entry.object,
                }
            })
            .collect();
        match s.name.as_str() {
            "train" => train = Some(examples),
            "dev" => dev = Some(examples),
            other => {
                ood.insert(other.to_string(), examples);
            }
        }
    }
    let missing = |what: &str| MimuError::format(dir, format!("manifest lacks the {what} split"));
    let bundle = DatasetBundle {
        meta: manifest.meta.clone(),
        train: train.ok_or_else(|| missing("train"))?,
        dev_iid: dev.ok_or_else(|| missing("dev"))?,
        ood_variants: ood,
    };
    Ok((bundle, manifest))
}

impl DatasetBundle {
    fn eval_splits_with_train(&self) -> Vec<(&str, &[Example])> {
        let mut out: Vec<(&str, &[Example])> = vec![("train", &self.train)];
        out.extend(self.eval_splits());
        out
    }
}
