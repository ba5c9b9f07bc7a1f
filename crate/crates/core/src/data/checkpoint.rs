use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::io::{decode_payload, encode_payload};
use crate::tensor::Real;
use crate::unet::{ArchConfig, ModelGraph};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PAYLOAD: &str = "params.bin";

/// Location of one parameter tensor inside `params.bin` (byte offsets).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub arch: ArchConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `manifest.json` and `params.bin` into `dir`.
pub fn save_checkpoint<F: Real>(model: &ModelGraph<F>, dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut payload = Vec::with_capacity(model.params.numel() * F::BYTES);
    let mut tensors = Vec::with_capacity(model.params.len());
    for (_, p) in model.params.iter() {
        let offset = payload.len();
        encode_payload(&p.value, &mut payload);
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            len: payload.len() - offset,
        });
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        dtype: F::DTYPE.to_string(),
        arch: model.config.clone(),
        tensors,
    };
    fs::write(dir.join(PAYLOAD), &payload)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Rebuilds the graph from the embedded [`ArchConfig`] and restores every
/// parameter bit-exactly.
pub fn load_checkpoint<F: Real>(dir: impl AsRef<Path>) -> Result<ModelGraph<F>> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if manifest.dtype != F::DTYPE {
        return Err(Error::Corrupt(format!("checkpoint dtype {} but {} requested", manifest.dtype, F::DTYPE)));
    }
    let payload = fs::read(dir.join(PAYLOAD))?;
    let expected: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if payload.len() != expected {
        return Err(Error::Corrupt(format!(
            "{PAYLOAD} holds {} bytes, manifest lists {expected}",
            payload.len()
        )));
    }
    let mut model = ModelGraph::<F>::build(&manifest.arch, 0)?;
    let mut by_name: HashMap<&str, &TensorEntry> = HashMap::new();
    for entry in &manifest.tensors {
        if by_name.insert(&entry.name, entry).is_some() {
            return Err(Error::Corrupt(format!("duplicate tensor {}", entry.name)));
        }
    }
    if by_name.len() != model.params.len() {
        return Err(Error::Corrupt(format!(
            "manifest lists {} tensors, architecture has {}",
            by_name.len(),
            model.params.len()
        )));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.get(id).name.clone();
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Corrupt(format!("missing tensor {name}")))?;
        let bytes = entry
            .offset
            .checked_add(entry.len)
            .and_then(|end| payload.get(entry.offset..end))
            .ok_or_else(|| Error::Corrupt(format!("tensor {name} lies outside {PAYLOAD}")))?;
        let value = decode_payload(entry.shape.clone(), bytes)?;
        model.params.set_value(id, value).map_err(|e| Error::Corrupt(format!("tensor {name}: {e}")))?;
    }
    Ok(model)
}
