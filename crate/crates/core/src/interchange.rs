// SPDX-License-Identifier: MIT OR Apache-2.0

//! Directory-based tensor interchange format.
//!
//! A bundle is a directory holding `manifest.json` plus one raw file per
//! tensor. Tensor files are little-endian IEEE-754, row-major, with no header;
//! the manifest carries name, role, shape, dtype, file name and an optional
//! SHA-256 of the file bytes. The same layout carries toy model weights,
//! decoder traces dumped from real checkpoints, candidate embeddings and patch
//! features.
//!
//! ```text
//! {
//!   "format": "partprobe-interchange",
//!   "version": 1,
//!   "kind": "model" | "trace" | "candidates" | "patch_features",
//!   "seed": 7,                      // optional
//!   "config": { ... },              // kind-specific
//!   "metadata": { ... },            // free-form provenance
//!   "tensors": [
//!     { "name": "unembedding", "role": "unembedding", "shape": [32, 16],
//!       "dtype": "f32", "file": "unembedding.bin", "sha256": "…" }
//!   ]
//! }
//! ```
//!
//! 32-bit tensors are widened to `f64` on load.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ProbeError, Result};
use crate::nn::Matrix;

/// Value of the manifest's `format` field.
pub const FORMAT_NAME: &str = "partprobe-interchange";
/// Highest manifest version this build reads.
pub const SCHEMA_VERSION: u32 = 1;
/// Manifest file name inside a bundle directory.
pub const MANIFEST_FILE: &str = "manifest.json";

/// What a bundle contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleKind {
    Model,
    Trace,
    Candidates,
    PatchFeatures,
}

/// On-disk element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A manifest's description of one tensor file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

/// Parsed `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: BundleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Dense n-dimensional tensor in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(ProbeError::Shape(format!(
                "tensor of shape {shape:?} needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn vector(v: &[f64]) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    /// Interpret as a matrix, checking the expected shape.
    pub fn to_matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        if self.shape != [rows, cols] {
            return Err(ProbeError::Shape(format!(
                "tensor `{name}` has shape {:?}, want [{rows}, {cols}]",
                self.shape
            )));
        }
        Matrix::from_vec(rows, cols, self.data.clone())
    }

    /// Interpret as a 2-D matrix of whatever shape it has.
    pub fn as_matrix(&self, name: &str) -> Result<Matrix> {
        match self.shape.as_slice() {
            [r, c] => Matrix::from_vec(*r, *c, self.data.clone()),
            other => Err(ProbeError::Shape(format!("tensor `{name}` is {other:?}, want 2-D"))),
        }
    }

    /// Interpret as a vector of length `len`.
    pub fn to_vector(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        if self.shape != [len] {
            return Err(ProbeError::Shape(format!(
                "tensor `{name}` has shape {:?}, want [{len}]",
                self.shape
            )));
        }
        Ok(self.data.clone())
    }
}

/// In-memory bundle: manifest fields plus named tensors in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub kind: BundleKind,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub metadata: serde_json::Value,
    tensors: Vec<(String, String, Tensor)>,
}

impl Bundle {
    pub fn new(kind: BundleKind) -> Self {
        Self {
            kind,
            seed: None,
            config: serde_json::Value::Null,
            metadata: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    /// Append a tensor; replaces an existing one with the same name.
    pub fn insert(&mut self, name: impl Into<String>, role: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        let role = role.into();
        if let Some(slot) = self.tensors.iter_mut().find(|(n, _, _)| *n == name) {
            *slot = (name, role, tensor);
        } else {
            self.tensors.push((name, role, tensor));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _, _)| n == name).map(|(_, _, t)| t)
    }

    /// Like [`Bundle::get`] but a missing tensor is an error naming it.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| ProbeError::MissingAsset(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Write the bundle to `dir`, creating it if needed.
    pub fn save(&self, dir: &Path, dtype: DType) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(|e| ProbeError::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, role, tensor) in &self.tensors {
            let file = format!("{}.bin", sanitize(name));
            let bytes = encode(&tensor.data, dtype);
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| ProbeError::io(&path, e))?;
            entries.push(TensorEntry {
                name: name.clone(),
                role: role.clone(),
                shape: tensor.shape.clone(),
                dtype,
                file,
                sha256: Some(hex::encode(Sha256::digest(&bytes))),
            });
        }
        let manifest = Manifest {
            format: FORMAT_NAME.to_string(),
            version: SCHEMA_VERSION,
            kind: self.kind,
            seed: self.seed,
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| ProbeError::json("manifest", e))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text + "\n").map_err(|e| ProbeError::io(&path, e))?;
        Ok(manifest)
    }

    /// Read and validate a bundle directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let mut bundle = Bundle::new(manifest.kind);
        bundle.seed = manifest.seed;
        bundle.config = manifest.config.clone();
        bundle.metadata = manifest.metadata.clone();
        for entry in &manifest.tensors {
            let tensor = read_tensor(dir, entry)?;
            bundle.insert(entry.name.clone(), entry.role.clone(), tensor);
        }
        Ok(bundle)
    }

    /// Load and additionally require a particular kind.
    pub fn load_kind(dir: &Path, kind: BundleKind) -> Result<Self> {
        let b = Self::load(dir)?;
        if b.kind != kind {
            return Err(ProbeError::interchange(
                dir,
                format!("expected a {kind:?} bundle, found {:?}", b.kind),
            ));
        }
        Ok(b)
    }
}

/// Parse and version-check a bundle's manifest without reading tensors.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| ProbeError::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| ProbeError::json(path.display().to_string(), e))?;
    if manifest.format != FORMAT_NAME {
        return Err(ProbeError::interchange(
            &path,
            format!("unknown format `{}`", manifest.format),
        ));
    }
    if manifest.version == 0 || manifest.version > SCHEMA_VERSION {
        return Err(ProbeError::interchange(
            &path,
            format!("unsupported schema version {}", manifest.version),
        ));
    }
    Ok(manifest)
}

fn read_tensor(dir: &Path, entry: &TensorEntry) -> Result<Tensor> {
    let path: PathBuf = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| ProbeError::io(&path, e))?;
    let count: usize = entry.shape.iter().product();
    let want = count * entry.dtype.size();
    if bytes.len() != want {
        return Err(ProbeError::Shape(format!(
            "tensor `{}` in {}: shape {:?} as {:?} needs {want} bytes, file has {}",
            entry.name,
            path.display(),
            entry.shape,
            entry.dtype,
            bytes.len()
        )));
    }
    if let Some(expected) = &entry.sha256 {
        let actual = hex::encode(Sha256::digest(&bytes));
        if !actual.eq_ignore_ascii_case(expected) {
            return Err(ProbeError::interchange(
                &path,
                format!("checksum mismatch for `{}`", entry.name),
            ));
        }
    }
    let data = decode(&bytes, entry.dtype);
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite(format!("tensor `{}`", entry.name)));
    }
    Tensor::new(entry.shape.clone(), data)
}

fn encode(data: &[f64], dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * dtype.size());
    match dtype {
        DType::F64 => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => data
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    out
}

fn decode(bytes: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
            .collect(),
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Bundle {
        let mut b = Bundle::new(BundleKind::Trace);
        b.seed = Some(3);
        b.insert(
            "a",
            "weight",
            Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, 9.0]).unwrap(),
        );
        b.insert("b", "bias", Tensor::vector(&[0.5, 0.25]));
        b
    }

    #[test]
    fn f64_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let b = sample();
        b.save(dir.path(), DType::F64).unwrap();
        assert_eq!(Bundle::load(dir.path()).unwrap(), b);
    }

    #[test]
    fn truncated_file_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path(), DType::F32).unwrap();
        let path = dir.path().join("a.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        // Drop the checksum so the shape check is what fires.
        let mut m = read_manifest(dir.path()).unwrap();
        m.tensors[0].sha256 = None;
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(Bundle::load(dir.path()), Err(ProbeError::Shape(_))));
    }

    #[test]
    fn corrupted_file_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path(), DType::F64).unwrap();
        let path = dir.path().join("b.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Bundle::load(dir.path()), Err(ProbeError::Interchange { .. })));
    }

    #[test]
    fn rejects_future_version_and_nan() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = sample();
        b.insert("bad", "x", Tensor::vector(&[f64::NAN]));
        b.save(dir.path(), DType::F64).unwrap();
        assert!(matches!(Bundle::load(dir.path()), Err(ProbeError::NonFinite(_))));

        let mut m = read_manifest(dir.path()).unwrap();
        m.version = SCHEMA_VERSION + 1;
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(ProbeError::Interchange { .. })));
    }

    proptest! {
        #[test]
        fn f32_round_trip_widens_exactly(values in prop::collection::vec(-1e6f32..1e6, 1..40)) {
            let dir = tempfile::tempdir().unwrap();
            let data: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
            let mut b = Bundle::new(BundleKind::PatchFeatures);
            b.insert("t", "features", Tensor::vector(&data));
            b.save(dir.path(), DType::F32).unwrap();
            let back = Bundle::load(dir.path()).unwrap();
            prop_assert_eq!(&back.require("t").unwrap().data, &data);
        }
    }
}
