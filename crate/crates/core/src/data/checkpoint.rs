//! Checkpoint files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic  "QGCKPT\0\0"             8 bytes
//! n      u64                      manifest length in bytes
//! JSON   manifest (UTF-8)         n bytes
//! f64 × Σ numel                   parameter payload, in manifest order
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, QCrossModel};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"QGCKPT\0\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub payload_bytes: u64,
    /// Free-form run metadata (modality, seed, epochs...).
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

/// Writes `model` to `path` through a temporary sibling file, so an
/// interrupted write never leaves a half-written checkpoint behind.
pub fn save_checkpoint(model: &QCrossModel, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
    let mut params = Vec::with_capacity(model.params.len());
    let mut offset = 0u64;
    for (_, name, t) in model.params.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += (t.numel() * 8) as u64;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        params,
        payload_bytes: offset,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::CheckpointFormat(e.to_string()))?;

    let mut bytes = Vec::with_capacity(16 + json.len() + offset as usize);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, _, t) in model.params.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parses the header and manifest, checking the format version.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 {
        return Err(Error::CheckpointTruncated(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::CheckpointFormat("missing checkpoint magic".into()));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let rest = &bytes[16..];
    if rest.len() < n {
        return Err(Error::CheckpointTruncated(format!(
            "manifest declares {n} bytes, only {} present",
            rest.len()
        )));
    }
    let value: serde_json::Value =
        serde_json::from_slice(&rest[..n]).map_err(|e| Error::CheckpointFormat(format!("manifest: {e}")))?;
    let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| Error::CheckpointFormat(format!("manifest: {e}")))?;
    Ok((manifest, &rest[n..]))
}

/// Loads a checkpoint, rebuilding the model from its stored configuration.
pub fn load_checkpoint(path: &Path) -> Result<(QCrossModel, Manifest)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, payload) = read_manifest(&bytes)?;
    if (payload.len() as u64) < manifest.payload_bytes {
        return Err(Error::CheckpointTruncated(format!(
            "payload declares {} bytes, only {} present",
            manifest.payload_bytes,
            payload.len()
        )));
    }
    let mut model = QCrossModel::new(manifest.config.clone(), 0).map_err(|e| Error::CheckpointConfig(e.to_string()))?;
    if manifest.params.len() != model.params.len() {
        return Err(Error::CheckpointConfig(format!(
            "manifest lists {} parameters, the configured model has {}",
            manifest.params.len(),
            model.params.len()
        )));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for (entry, id) in manifest.params.iter().zip(ids) {
        let current = model.params.get(id);
        if model.params.name(id) != entry.name {
            return Err(Error::CheckpointConfig(format!(
                "parameter `{}` found where `{}` was expected",
                entry.name,
                model.params.name(id)
            )));
        }
        if current.shape() != entry.shape.as_slice() {
            return Err(Error::CheckpointShape {
                name: entry.name.clone(),
                manifest: entry.shape.clone(),
                model: current.shape().to_vec(),
            });
        }
        let start = entry.offset as usize;
        let end = start + current.numel() * 8;
        if end > payload.len() {
            return Err(Error::CheckpointTruncated(format!("`{}` runs past the payload", entry.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.params.set(id, Tensor::new(&entry.shape, data)?)?;
    }
    Ok((model, manifest))
}

/// Like [`load_checkpoint`], but fails unless the stored configuration equals
/// `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<(QCrossModel, Manifest)> {
    let (model, manifest) = load_checkpoint(path)?;
    if &manifest.config != expected {
        return Err(Error::CheckpointConfig(format!(
            "stored configuration {:?} differs from the requested {:?}",
            manifest.config, expected
        )));
    }
    Ok((model, manifest))
}
