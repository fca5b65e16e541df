//! Single-file checkpoint: `FBEVCKPT`, a little-endian `u64` header length,
//! the JSON header, then every tensor's raw little-endian buffer in header
//! order (sorted by name).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FBEVCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
enum Buffer {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

/// Named tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Buffer>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let buf = match T::DTYPE {
            "f32" => Buffer::F32(t.cast()),
            _ => Buffer::F64(t.cast()),
        };
        self.tensors.insert(name.into(), buf);
    }

    /// Tensor converted to the requested precision.
    pub fn get<T: Scalar>(&self, name: &str) -> Option<Tensor<T>> {
        self.tensors.get(name).map(|b| match b {
            Buffer::F32(t) => t.cast(),
            Buffer::F64(t) => t.cast(),
        })
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.tensors.get(name).map(|b| match b {
            Buffer::F32(t) => t.shape(),
            Buffer::F64(t) => t.shape(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            tensors: self
                .tensors
                .iter()
                .map(|(name, b)| {
                    let (shape, dtype) = match b {
                        Buffer::F32(t) => (t.shape().to_vec(), "f32"),
                        Buffer::F64(t) => (t.shape().to_vec(), "f64"),
                    };
                    TensorEntry {
                        name: name.clone(),
                        shape,
                        dtype: dtype.into(),
                    }
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in self.tensors.values() {
            match b {
                Buffer::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                Buffer::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| Error::json("checkpoint header", e))?;
        let mut off = hend;
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(bad(&format!("unsupported dtype '{other}' for '{}'", e.name))),
            };
            let end = off + n * width;
            if end > bytes.len() {
                return Err(bad(&format!("truncated data for '{}'", e.name)));
            }
            let raw = &bytes[off..end];
            let buf = if width == 4 {
                let data = raw.chunks_exact(4).map(f32::read_le).collect();
                Buffer::F32(Tensor::new(e.shape, data).expect("length checked"))
            } else {
                let data = raw.chunks_exact(8).map(f64::read_le).collect();
                Buffer::F64(Tensor::new(e.shape, data).expect("length checked"))
            };
            tensors.insert(e.name, buf);
            off = end;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            tensors,
            meta: header.meta,
        })
    }

    /// Writes to a temporary sibling and renames, so a crash never leaves a
    /// half-written checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
