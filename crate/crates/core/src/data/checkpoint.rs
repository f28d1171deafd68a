//! Directory checkpoints: `manifest.json` describing every tensor plus a flat
//! little-endian `weights.bin` payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{layout, ModelConfig, NamedWeights};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Byte length.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    pub records: Vec<Record>,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, config: &ModelConfig, weights: &NamedWeights<f32>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload = Vec::new();
    let mut records = Vec::with_capacity(weights.len());
    for (name, t) in weights.iter() {
        let offset = payload.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        records.push(Record {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: payload.len() - offset,
        });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        records,
    };
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: mpath.clone(),
        source: e,
    })?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, payload).map_err(|e| Error::io(&wpath, e))
}

/// Loads and validates a checkpoint; the weights are checked against the
/// parameter layout implied by the stored config.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelConfig, NamedWeights<f32>)> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: mpath.clone(),
        source: e,
    })?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion {
            path: mpath,
            found: manifest.version as u64,
            expected: CHECKPOINT_VERSION as u64,
        });
    }
    let wpath = dir.join(WEIGHTS_FILE);
    let payload = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let expected: usize = manifest.records.iter().map(|r| r.len).sum();
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: wpath,
            expected,
            found: payload.len(),
        });
    }
    let mismatch = |msg: String| Error::ManifestMismatch {
        path: mpath.clone(),
        msg,
    };
    if payload.len() > expected {
        return Err(mismatch(format!(
            "payload has {} bytes, records describe {expected}",
            payload.len()
        )));
    }
    let specs = layout(&manifest.config)?;
    if specs.len() != manifest.records.len() {
        return Err(mismatch(format!(
            "config implies {} tensors, manifest lists {}",
            specs.len(),
            manifest.records.len()
        )));
    }
    let mut weights = NamedWeights::new();
    let mut cursor = 0;
    for (r, spec) in manifest.records.iter().zip(&specs) {
        if r.name != spec.name || r.shape != spec.shape {
            return Err(mismatch(format!(
                "record `{}` {:?} disagrees with config parameter `{}` {:?}",
                r.name, r.shape, spec.name, spec.shape
            )));
        }
        let numel: usize = r.shape.iter().product();
        if r.len != numel * 4 || r.offset != cursor {
            return Err(mismatch(format!(
                "record `{}`: shape {:?} needs {} bytes at offset {cursor}, manifest says {} at {}",
                r.name,
                r.shape,
                numel * 4,
                r.len,
                r.offset
            )));
        }
        let data = payload[r.offset..r.offset + r.len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        weights.insert(r.name.clone(), Tensor::new(&r.shape, data)?)?;
        cursor += r.len;
    }
    Ok((manifest.config, weights))
}
