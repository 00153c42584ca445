//! Binary checkpoint container: magic, little-endian `u64` manifest length,
//! JSON manifest, then every parameter's raw little-endian values in manifest
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::{ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"LESSCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub preset: String,
    pub seed: u64,
    pub steps: usize,
    pub precision: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>, preset: &str, seed: u64, steps: usize) -> Result<Vec<u8>> {
    let manifest = CheckpointManifest {
        preset: preset.to_string(),
        seed,
        steps,
        precision: T::NAME.to_string(),
        tensors: store
            .iter()
            .map(|(_, name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    let width = std::mem::size_of::<T>();
    let mut out = Vec::with_capacity(16 + json.len() + store.scalar_count() * width);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in store.iter() {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes_vec());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(CheckpointManifest, ParamStore<T>)> {
    let bad = |msg: &str| Error::Parse(format!("checkpoint: {msg}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if manifest.precision != T::NAME {
        return Err(bad(&format!("stored as {}, requested {}", manifest.precision, T::NAME)));
    }
    let width = std::mem::size_of::<T>();
    let mut offset = 16 + len;
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + count * width)
            .ok_or_else(|| bad(&format!("truncated data for {}", entry.name)))?;
        let data = raw.chunks_exact(width).map(T::from_le_slice).collect();
        store.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        offset += count * width;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((manifest, store))
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    preset: &str,
    seed: u64,
    steps: usize,
) -> Result<()> {
    write_atomic(path, &encode_checkpoint(store, preset, seed, steps)?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(CheckpointManifest, ParamStore<T>)> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Copies checkpoint tensors into `store` by name; every name must exist with
/// the same shape.
pub fn restore_into<T: Scalar>(store: &mut ParamStore<T>, loaded: &ParamStore<T>) -> Result<()> {
    if store.len() != loaded.len() {
        return Err(Error::dim(format!(
            "checkpoint has {} tensors, model has {}",
            loaded.len(),
            store.len()
        )));
    }
    for (_, name, t) in loaded.iter() {
        let id = store
            .find(name)
            .ok_or_else(|| Error::Parse(format!("checkpoint tensor {name} not in model")))?;
        store.replace(id, t.clone())?;
    }
    Ok(())
}
