use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ParamLayout;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub blob: String,
    pub config: ModelConfig,
    #[serde(default)]
    pub vocab: Option<Vocabulary>,
    pub tensors: Vec<TensorRecord>,
    #[serde(default)]
    pub train_state: Option<serde_json::Value>,
}

/// Model weights plus optional extra tensors (optimizer moments) and
/// free-form training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Option<Vocabulary>,
    pub params: Vec<f32>,
    pub extra: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub train_state: Option<serde_json::Value>,
}

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(blob)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.json` and `<stem>.bin`. The manifest is written last so a
/// readable manifest always points at a complete blob.
pub fn save_checkpoint(manifest_path: &Path, ck: &Checkpoint) -> Result<()> {
    let layout = ParamLayout::new(&ck.config);
    if ck.params.len() != layout.total() {
        return Err(ck_err(format!(
            "parameter count {} does not match config ({})",
            ck.params.len(),
            layout.total()
        )));
    }
    let blob_name = manifest_path
        .with_extension("bin")
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| ck_err("checkpoint path has no file name"))?
        .to_string();

    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: &str, shape: &[usize], data: &[f32]| {
        let offset = bytes.len();
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorRecord {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
            nbytes: data.len() * 4,
        });
    };
    for e in layout.entries() {
        push(&e.name, &e.shape, &ck.params[e.range()]);
    }
    for (name, shape, data) in &ck.extra {
        if shape.iter().product::<usize>() != data.len() {
            return Err(ck_err(format!("tensor {name} shape does not match its data")));
        }
        push(name, shape, data);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: DTYPE.to_string(),
        blob: blob_name.clone(),
        config: ck.config.clone(),
        vocab: ck.vocab.clone(),
        tensors,
        train_state: ck.train_state.clone(),
    };
    write_atomic(&blob_path(manifest_path, &blob_name), &bytes)?;
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(manifest_path, &json)
}

pub fn load_manifest(manifest_path: &Path) -> Result<Manifest> {
    let text = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)
        .map_err(|e| ck_err(format!("{}: malformed manifest: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ck_err(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.dtype != DTYPE {
        return Err(ck_err(format!("unsupported dtype {}", manifest.dtype)));
    }
    manifest.config.check().map_err(|e| ck_err(e.to_string()))?;
    Ok(manifest)
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<Checkpoint> {
    let manifest = load_manifest(manifest_path)?;
    let blob = blob_path(manifest_path, &manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let read = |t: &TensorRecord| -> Result<Vec<f32>> {
        let n: usize = t.shape.iter().product();
        if t.nbytes != n * 4 || t.offset + t.nbytes > bytes.len() {
            return Err(ck_err(format!("tensor {} lies outside the blob", t.name)));
        }
        Ok(bytes[t.offset..t.offset + t.nbytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };
    let layout = ParamLayout::new(&manifest.config);
    let mut params = vec![0.0f32; layout.total()];
    for e in layout.entries() {
        let t = manifest
            .tensors
            .iter()
            .find(|t| t.name == e.name)
            .ok_or_else(|| ck_err(format!("missing tensor {}", e.name)))?;
        if t.shape != e.shape {
            return Err(ck_err(format!(
                "tensor {} has shape {:?}, expected {:?}",
                e.name, t.shape, e.shape
            )));
        }
        params[e.range()].copy_from_slice(&read(t)?);
    }
    let mut extra = Vec::new();
    for t in &manifest.tensors {
        if layout.entry(&t.name).is_none() {
            extra.push((t.name.clone(), t.shape.clone(), read(t)?));
        }
    }
    Ok(Checkpoint {
        config: manifest.config,
        vocab: manifest.vocab,
        params,
        extra,
        train_state: manifest.train_state,
    })
}
