//! Versioned container of named tensors.
//!
//! Layout: 8-byte magic `SURDOCKP`, `u32` format version, `u64` header
//! length, a JSON header (`dtype`, free-form `meta`, tensor names and
//! shapes), then every tensor's values back to back in little-endian order.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};

const MAGIC: &[u8; 8] = b"SURDOCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("I/O error on checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid checkpoint {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("checkpoint has no tensor named '{0}'")]
    MissingTensor(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        let plain = Tensor::new(tensor.shape(), tensor.data().to_vec()).expect("valid tensor");
        self.tensors.push((name.into(), plain));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            dtype: T::DTYPE.to_string(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("serializable header");
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * T::BYTES).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.put_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, CheckpointError> {
        let bad = |detail: String| CheckpointError::Format {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header overruns file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| bad(format!("header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(bad(format!(
                "stored as {}, requested {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let mut pos = header_end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = pos + n * T::BYTES;
            if end > bytes.len() {
                return Err(bad(format!("tensor '{}' is truncated", entry.name)));
            }
            let values = bytes[pos..end].chunks_exact(T::BYTES).map(T::take_le).collect();
            let t = Tensor::new(&entry.shape, values).map_err(|e| bad(e.to_string()))?;
            tensors.push((entry.name, t));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        // write-then-rename so readers never observe a partial file
        let tmp = path.with_extension("ckpt.partial");
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_meta() {
        let mut ck = Checkpoint::<f32>::new(serde_json::json!({"step": 7}));
        ck.push("w", &Tensor::from_fn(&[2, 3], |i| i as f32 / 3.0));
        ck.push("b", &Tensor::full(&[1], -0.1));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::<f32>::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta["step"], 7);
        assert!(back.get("missing").is_err());
    }

    #[test]
    fn rejects_wrong_dtype_and_truncation() {
        let mut ck = Checkpoint::<f64>::new(serde_json::Value::Null);
        ck.push("w", &Tensor::full(&[4], 1.5));
        let bytes = ck.to_bytes();
        let p = Path::new("mem");
        assert!(Checkpoint::<f32>::from_bytes(&bytes, p).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        assert!(Checkpoint::<f64>::from_bytes(b"garbage", p).is_err());
    }
}
