//! Checkpoint files: a JSON manifest listing every tensor by name, shape and
//! byte offset, next to a blob of little-endian `f64` values concatenated in
//! manifest order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata (model configuration, strategy, seed).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Paths of the two files making up a checkpoint with the given stem.
pub fn checkpoint_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(store: &ParamStore, dir: &Path, stem: &str, meta: serde_json::Value) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let (manifest_path, blob_path) = checkpoint_paths(dir, stem);
    let mut blob = Vec::with_capacity(store.numel() * 8);
    let mut tensors = Vec::with_capacity(store.len());
    for p in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            byte_offset: blob.len() as u64,
        });
        for v in p.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        blob: format!("{stem}.bin"),
        tensors,
        meta,
    };
    write_atomic(&blob_path, &blob)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&manifest_path, text.as_bytes())?;
    Ok(manifest_path)
}

pub fn read_manifest(manifest_path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(manifest_path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Overwrites the values of `store` from a checkpoint. Every parameter must
/// be present with an identical shape.
pub fn load_checkpoint(store: &mut ParamStore, manifest_path: &Path) -> Result<Manifest> {
    let manifest = read_manifest(manifest_path)?;
    let blob_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let blob = fs::read(&blob_path)?;
    for p in store.iter_mut() {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == p.name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {:?} missing from checkpoint", p.name)))?;
        if entry.shape != p.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} has shape {:?} in checkpoint but {:?} in model",
                p.name,
                entry.shape,
                p.tensor.shape()
            )));
        }
        let start = entry.byte_offset as usize;
        let end = start + p.tensor.len() * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("tensor {:?} runs past end of blob", p.name)));
        }
        for (dst, chunk) in p.tensor.data_mut().iter_mut().zip(blob[start..end].chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store
            .add("a", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap())
            .unwrap();
        store.add("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        let path = save_checkpoint(&store, dir.path(), "ckpt", serde_json::json!({"k": 1})).unwrap();

        let manifest = read_manifest(&path).unwrap();
        assert_eq!(manifest.tensors[1].byte_offset, 32);
        assert_eq!(manifest.tensors[0].shape, vec![2, 2]);
        let blob = fs::read(dir.path().join("ckpt.bin")).unwrap();
        assert_eq!(blob.len(), 7 * 8);
        assert_eq!(&blob[8..16], &(-2.5f64).to_le_bytes());

        let mut other = store.clone();
        other.iter_mut().for_each(|p| p.tensor.data_mut().fill(0.0));
        load_checkpoint(&mut other, &path).unwrap();
        for (x, y) in store.iter().zip(other.iter()) {
            assert_eq!(x.tensor.data(), y.tensor.data());
        }
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add("proj.weight", Tensor::zeros(&[2, 3])).unwrap();
        let path = save_checkpoint(&store, dir.path(), "c", serde_json::Value::Null).unwrap();
        let mut other = ParamStore::new();
        other.add("proj.weight", Tensor::zeros(&[3, 2])).unwrap();
        let err = load_checkpoint(&mut other, &path).unwrap_err().to_string();
        assert!(err.contains("proj.weight"), "{err}");
    }
}
