//! On-disk tensor bundles: a `manifest.json` describing every tensor and one
//! little-endian `data.bin` blob holding their contents back to back.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::BundleError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Length in bytes.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// In-memory bundle. Values are held as `f32`, matching the on-disk dtype.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorBundle {
    names: Vec<String>,
    tensors: Vec<ArrayD<f32>>,
    pub meta: serde_json::Value,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(meta: serde_json::Value) -> Self {
        Self {
            meta,
            ..Self::default()
        }
    }

    /// Insert or replace a tensor, keeping insertion order for new names.
    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f32>) {
        let name = name.into();
        match self.names.iter().position(|n| *n == name) {
            Some(i) => self.tensors[i] = tensor,
            None => {
                self.names.push(name);
                self.tensors.push(tensor);
            }
        }
    }

    /// Insert an `f64` tensor, rounding each value to `f32`.
    pub fn insert_f64<D: ndarray::Dimension>(
        &mut self,
        name: impl Into<String>,
        tensor: &ndarray::Array<f64, D>,
    ) {
        let t = tensor.mapv(|v| v as f32).into_dyn();
        self.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f32>, BundleError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| BundleError::NotFound(name.to_string()))
    }

    pub fn get_f64(&self, name: &str) -> Result<ArrayD<f64>, BundleError> {
        Ok(self.get(name)?.mapv(f64::from))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let tensors = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                let length = (t.len() * 4) as u64;
                let e = TensorEntry {
                    name: name.clone(),
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset,
                    length,
                };
                offset += length;
                e
            })
            .collect();
        Manifest {
            tensors,
            meta: self.meta.clone(),
        }
    }

    pub fn blob(&self) -> Vec<u8> {
        let total: usize = self.tensors.iter().map(|t| t.len() * 4).sum();
        let mut out = Vec::with_capacity(total);
        for t in &self.tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<(), BundleError> {
        fs::create_dir_all(dir).map_err(|source| BundleError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let manifest = serde_json::to_string_pretty(&self.manifest())
            .map_err(|e| BundleError::Manifest(e.to_string()))?;
        write(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
        write(&dir.join(DATA_FILE), &self.blob())
    }

    pub fn load(dir: &Path) -> Result<Self, BundleError> {
        let manifest_bytes = read(&dir.join(MANIFEST_FILE))?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| BundleError::Manifest(e.to_string()))?;
        let blob = read(&dir.join(DATA_FILE))?;
        Self::from_parts(manifest, &blob)
    }

    pub fn from_parts(manifest: Manifest, blob: &[u8]) -> Result<Self, BundleError> {
        let mut out = TensorBundle::with_meta(manifest.meta);
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(BundleError::UnknownDtype {
                    name: e.name,
                    dtype: e.dtype,
                });
            }
            let count: usize = e.shape.iter().product();
            let end = e.offset + e.length;
            if e.length != (count * 4) as u64 || end > blob.len() as u64 {
                return Err(BundleError::SizeMismatch {
                    name: e.name,
                    offset: e.offset,
                    end,
                    blob_len: blob.len() as u64,
                });
            }
            let bytes = &blob[e.offset as usize..end as usize];
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), values)
                .map_err(|err| BundleError::Manifest(err.to_string()))?;
            out.insert(e.name, arr);
        }
        Ok(out)
    }
}

fn read(path: &Path) -> Result<Vec<u8>, BundleError> {
    if !path.exists() {
        return Err(BundleError::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), BundleError> {
    fs::write(path, bytes).map_err(|source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    })
}
