//! Checkpoint files: one UTF-8 JSON manifest line, then a raw little-endian
//! f32 payload. Manifest offsets and lengths count floats from the start of
//! the payload.

use crate::error::{Error, Result};
use crate::model::VqaModel;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestTensor>,
    pub vocab_size: usize,
    pub answer_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_mean_rgb: Option<[f32; 3]>,
}

/// Manifest plus decoded tensors, before any model-shape interpretation.
#[derive(Debug)]
pub struct RawCheckpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor)>,
}

impl RawCheckpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Serialize named tensors with a shared manifest header.
pub fn save_tensors(
    path: &Path,
    tensors: &[(&str, &Tensor)],
    vocab_size: usize,
    answer_count: usize,
    train_mean_rgb: Option<[f32; 3]>,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, t) in tensors {
        entries.push(ManifestTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let manifest = Manifest {
        tensors: entries,
        vocab_size,
        answer_count,
        train_mean_rgb,
    };
    let mut out = serde_json::to_string(&manifest)
        .map_err(|e| Error::CheckpointManifest { reason: e.to_string() })?
        .into_bytes();
    out.push(b'\n');
    out.reserve(offset * 4);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Parse a checkpoint file into named tensors, validating the manifest
/// against the payload.
pub fn load_tensors(path: &Path) -> Result<RawCheckpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CheckpointManifest {
            reason: "no newline-terminated manifest line".into(),
        })?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::CheckpointManifest {
            reason: e.to_string(),
        })?;
    let payload = &bytes[newline + 1..];
    if payload.len() % 4 != 0 {
        return Err(Error::CheckpointTruncated {
            reason: format!("payload is {} bytes, not a multiple of 4", payload.len()),
        });
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        if numel != entry.len || entry.shape.iter().any(|&d| d == 0) {
            return Err(Error::CheckpointShape {
                name: entry.name.clone(),
                shape: entry.shape.clone(),
                len: entry.len,
            });
        }
        let end = entry.offset.checked_add(entry.len).ok_or_else(|| {
            Error::CheckpointTruncated {
                reason: format!("tensor '{}' offset overflows", entry.name),
            }
        })?;
        if end > floats.len() {
            return Err(Error::CheckpointTruncated {
                reason: format!(
                    "tensor '{}' needs floats [{}, {end}) but payload holds {}",
                    entry.name,
                    entry.offset,
                    floats.len()
                ),
            });
        }
        let data = floats[entry.offset..end].to_vec();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok(RawCheckpoint { manifest, tensors })
}

/// Write a model checkpoint.
pub fn save_model(model: &VqaModel, path: &Path) -> Result<()> {
    let named = model.params();
    save_tensors(
        path,
        &named,
        model.vocab_size,
        model.answer_count,
        model.train_mean_rgb,
    )
}

/// Read a model checkpoint, requiring every parameter with its exact shape.
pub fn load_model(path: &Path) -> Result<VqaModel> {
    let raw = load_tensors(path)?;
    let mut model = VqaModel::new(raw.manifest.vocab_size, raw.manifest.answer_count, 0)
        .map_err(|e| Error::CheckpointModel { reason: e.to_string() })?;
    for (name, slot) in model.params_mut() {
        let found = raw.tensor(name).ok_or_else(|| Error::CheckpointModel {
            reason: format!("missing tensor '{name}'"),
        })?;
        if found.shape() != slot.shape() {
            return Err(Error::CheckpointModel {
                reason: format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    found.shape(),
                    slot.shape()
                ),
            });
        }
        *slot = found.clone();
    }
    model.train_mean_rgb = raw.manifest.train_mean_rgb;
    Ok(model)
}
