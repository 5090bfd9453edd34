//! Parameter checkpoints: a JSON manifest plus a raw blob.
//!
//! The blob is every parameter's data, in manifest order, as consecutive
//! little-endian IEEE-754 `f64` values with no header or padding. Entry
//! `offset` and `shape` are in elements, so entry `e` occupies bytes
//! `8·offset .. 8·(offset + Π shape)`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ParamSet, Shape, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "stdemand-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Shape,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub byte_order: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub total_elements: usize,
    pub entries: Vec<CheckpointEntry>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path minus extension>.bin` (blob).
pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<CheckpointManifest> {
    let blob = blob_path(path);
    let mut bytes = Vec::with_capacity(params.total_elements() * 8);
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for id in params.ids() {
        let value = params.value(id);
        entries.push(CheckpointEntry {
            name: params.name(id).to_string(),
            shape: value.shape().clone(),
            offset,
        });
        offset += value.len();
        for x in value.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        dtype: "f64".to_string(),
        byte_order: "little".to_string(),
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        total_elements: offset,
        entries,
    };
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.dtype != "f64" || manifest.byte_order != "little" {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} / {} / {}",
            manifest.format, manifest.dtype, manifest.byte_order
        )));
    }
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    if bytes.len() != manifest.total_elements * 8 {
        return Err(Error::Format(format!(
            "blob has {} bytes, manifest expects {}",
            bytes.len(),
            manifest.total_elements * 8
        )));
    }
    let mut params = ParamSet::new();
    for entry in &manifest.entries {
        let n = entry.shape.numel();
        let end = entry.offset + n;
        if end > manifest.total_elements {
            return Err(Error::Format(format!("entry `{}` overruns the blob", entry.name)));
        }
        let data = bytes[entry.offset * 8..end * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.add(entry.name.clone(), Tensor::from_vec(entry.shape.dims().to_vec(), data)?)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamSet::new();
        p.add("a/w", Tensor::from_vec(vec![2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap())
            .unwrap();
        p.add("b", Tensor::scalar(std::f64::consts::PI)).unwrap();
        let path = dir.path().join("model.json");
        let manifest = save_checkpoint(&p, &path).unwrap();
        assert_eq!(manifest.entries[1].offset, 4);
        assert_eq!(manifest.blob, "model.bin");
        let bytes = fs::read(dir.path().join("model.bin")).unwrap();
        assert_eq!(bytes.len(), 40);
        assert_eq!(&bytes[0..8], &1.5f64.to_le_bytes());
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, p);
        for id in p.ids() {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(back.value(id)), bits(p.value(id)));
        }
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamSet::new();
        p.add("w", Tensor::zeros(vec![3]).unwrap()).unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&p, &path).unwrap();
        fs::write(dir.path().join("ckpt.bin"), [0u8; 16]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
