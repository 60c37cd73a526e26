//! On-disk parameter checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` and `weights.bin`. The blob is the
//! concatenation of every tensor as raw little-endian `f32`; the manifest records each
//! tensor's name, shape, byte offset and kind, plus the blob digest and free-form metadata.

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FicoError, Result};
use crate::io::{read_json, sha256_hex, write_atomic, write_dir_atomic, write_json_atomic};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Number of `f32` values.
    pub len: usize,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub endianness: String,
    pub blob: String,
    pub blob_bytes: u64,
    pub blob_sha256: String,
    pub tensors: Vec<TensorRecord>,
    pub metadata: serde_json::Value,
}

/// Writes every store entry accepted by `keep` to the checkpoint directory `dir`, replacing any
/// previous checkpoint there.
pub fn save(
    dir: &Path,
    store: &ParamStore<f32>,
    keep: impl Fn(&str) -> bool,
    metadata: serde_json::Value,
) -> Result<Manifest> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for e in store.entries().iter().filter(|e| keep(&e.name)) {
        tensors.push(TensorRecord {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            offset: blob.len() as u64,
            len: e.value.numel(),
            kind: e.kind,
        });
        for v in e.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_blob(dir, tensors, blob, metadata)
}

fn write_blob(
    dir: &Path,
    tensors: Vec<TensorRecord>,
    blob: Vec<u8>,
    metadata: serde_json::Value,
) -> Result<Manifest> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: "f32".into(),
        endianness: "little".into(),
        blob: BLOB_FILE.into(),
        blob_bytes: blob.len() as u64,
        blob_sha256: sha256_hex(&blob),
        tensors,
        metadata,
    };
    write_dir_atomic(dir, |tmp| {
        write_atomic(&tmp.join(BLOB_FILE), &blob)?;
        write_json_atomic(&tmp.join(MANIFEST_FILE), &manifest)
    })?;
    Ok(manifest)
}

/// An opened checkpoint. Every tensor read is recorded in an access log.
#[derive(Debug)]
pub struct CheckpointReader {
    dir: PathBuf,
    manifest: Manifest,
    blob: Vec<u8>,
    log: RefCell<Vec<String>>,
}

impl CheckpointReader {
    /// Opens `dir`, verifying format, blob size, blob digest and tensor bounds.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        let bad = |msg: String| FicoError::Checkpoint(format!("{}: {msg}", dir.display()));
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        if manifest.dtype != "f32" || manifest.endianness != "little" {
            return Err(bad(format!(
                "unsupported encoding {}/{}",
                manifest.dtype, manifest.endianness
            )));
        }
        let blob_path = dir.join(&manifest.blob);
        let blob = std::fs::read(&blob_path).map_err(|e| FicoError::io(&blob_path, e))?;
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(bad(format!(
                "blob has {} bytes, manifest says {}",
                blob.len(),
                manifest.blob_bytes
            )));
        }
        if sha256_hex(&blob) != manifest.blob_sha256 {
            return Err(bad("blob digest mismatch".into()));
        }
        for t in &manifest.tensors {
            let end = t.offset.checked_add(4 * t.len as u64);
            if t.shape.iter().product::<usize>() != t.len
                || end.is_none_or(|e| e > blob.len() as u64)
            {
                return Err(bad(format!("tensor {} has an inconsistent record", t.name)));
            }
        }
        Ok(CheckpointReader {
            dir: dir.to_path_buf(),
            manifest,
            blob,
            log: RefCell::new(Vec::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn metadata(&self) -> &serde_json::Value {
        &self.manifest.metadata
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.manifest.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.record(name).is_some()
    }

    pub fn record(&self, name: &str) -> Option<&TensorRecord> {
        self.manifest.tensors.iter().find(|t| t.name == name)
    }

    pub fn read(&self, name: &str) -> Result<Tensor<f32>> {
        let rec = self.record(name).ok_or_else(|| {
            FicoError::Checkpoint(format!("{}: no tensor {name}", self.dir.display()))
        })?;
        self.log.borrow_mut().push(name.to_string());
        let start = rec.offset as usize;
        let data = self.blob[start..start + 4 * rec.len]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::from_vec(&rec.shape, data)
    }

    /// Names read so far, in order.
    pub fn access_log(&self) -> Vec<String> {
        self.log.borrow().clone()
    }
}

/// Loads every store entry accepted by `want` from the checkpoint. Entries missing from the
/// checkpoint or stored with a different shape are errors. Returns the loaded names.
pub fn load_into(
    reader: &CheckpointReader,
    store: &mut ParamStore<f32>,
    want: impl Fn(&str) -> bool,
) -> Result<Vec<String>> {
    let names: Vec<String> = store
        .entries()
        .iter()
        .filter(|e| want(&e.name))
        .map(|e| e.name.clone())
        .collect();
    for name in &names {
        store.set(name, reader.read(name)?)?;
    }
    Ok(names)
}

/// Copies the checkpoint at `src` to `dst`, dropping every tensor whose name starts with
/// `prefix`.
pub fn copy_without_prefix(src: &Path, dst: &Path, prefix: &str) -> Result<Manifest> {
    let reader = CheckpointReader::open(src)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for rec in reader
        .manifest
        .tensors
        .iter()
        .filter(|t| !t.name.starts_with(prefix))
    {
        let start = rec.offset as usize;
        tensors.push(TensorRecord {
            offset: blob.len() as u64,
            ..rec.clone()
        });
        blob.extend_from_slice(&reader.blob[start..start + 4 * rec.len]);
    }
    write_blob(dst, tensors, blob, reader.manifest.metadata.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.add(
            "teacher.w",
            normal_tensor(&[2, 3], 1.0, &mut rng),
            ParamKind::Frozen,
        );
        s.add(
            "student.w",
            normal_tensor(&[4], 1.0, &mut rng),
            ParamKind::Trainable,
        );
        s.add(
            "diifi.k2.w",
            normal_tensor(&[3, 1, 2], 1.0, &mut rng),
            ParamKind::Trainable,
        );
        s.add(
            "student.bn.mean",
            Tensor::full(&[4], f32::MIN_POSITIVE),
            ParamKind::Buffer,
        );
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let src = store();
        let path = dir.path().join("ck");
        save(&path, &src, |_| true, serde_json::json!({"seed": 3})).unwrap();
        let reader = CheckpointReader::open(&path).unwrap();
        let mut dst = src.clone();
        for e in dst.entries().to_vec() {
            dst.set(&e.name, Tensor::zeros(e.value.shape())).unwrap();
        }
        load_into(&reader, &mut dst, |_| true).unwrap();
        for (a, b) in src.entries().iter().zip(dst.entries()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(reader.metadata()["seed"], 3);
        assert_eq!(reader.manifest().tensors[1].offset, 24);
    }

    #[test]
    fn access_log_and_prefix_removal() {
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full");
        let lean = dir.path().join("lean");
        save(&full, &store(), |_| true, serde_json::Value::Null).unwrap();
        copy_without_prefix(&full, &lean, "diifi.").unwrap();
        let reader = CheckpointReader::open(&lean).unwrap();
        assert!(!reader.contains("diifi.k2.w"));
        assert_eq!(reader.names().count(), 3);
        let mut s = store();
        load_into(&reader, &mut s, |n| !n.starts_with("diifi.")).unwrap();
        assert!(reader.access_log().iter().all(|n| !n.starts_with("diifi.")));
        assert_eq!(reader.access_log().len(), 3);
        assert!(load_into(&reader, &mut s, |_| true).is_err());
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        save(&path, &store(), |_| true, serde_json::Value::Null).unwrap();
        let blob = path.join(BLOB_FILE);
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes[5] ^= 1;
        std::fs::write(&blob, bytes).unwrap();
        assert!(matches!(
            CheckpointReader::open(&path),
            Err(FicoError::Checkpoint(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        save(&path, &store(), |_| true, serde_json::Value::Null).unwrap();
        let reader = CheckpointReader::open(&path).unwrap();
        let mut other = ParamStore::new();
        other.add("student.w", Tensor::zeros(&[5]), ParamKind::Trainable);
        assert!(load_into(&reader, &mut other, |_| true).is_err());
    }
}
