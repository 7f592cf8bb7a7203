//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "ECLRCKPT"
//! version      u32       currently 1
//! header_len   u64       byte length of the JSON header
//! header       JSON      {"config": ModelConfig|null, "metadata": {...},
//!                         "tensors": [{"name", "shape", "dtype": "f32", "offset", "len"}]}
//! payload      f32 LE    tensor data; `offset`/`len` count elements from payload start
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Scalar, Tensor};

use super::ModelConfig;

pub const MAGIC: &[u8; 8] = b"ECLRCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Option<ModelConfig>,
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorIndex {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Option<ModelConfig>,
    metadata: serde_json::Value,
    tensors: Vec<TensorIndex>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(
        config: Option<ModelConfig>,
        store: &ParamStore<T>,
        metadata: serde_json::Value,
    ) -> Self {
        let tensors = store
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                data: e.value.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Self {
            config,
            metadata,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_tensor<T: Scalar>(t: &NamedTensor) -> Tensor<T> {
        Tensor::from_vec(&t.shape, t.data.iter().map(|&v| T::of(v as f64)).collect()).expect("consistent checkpoint")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let index = self
            .tensors
            .iter()
            .map(|t| {
                let entry = TensorIndex {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    dtype: "f32".into(),
                    offset,
                    len: t.data.len(),
                };
                offset += t.data.len();
                entry
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors: index,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing ECLRCKPT magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
        let payload = &bytes[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            if t.dtype != "f32" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", t.name, t.dtype)));
            }
            if t.shape.iter().product::<usize>() != t.len {
                return Err(Error::Checkpoint(format!("{}: shape does not match length", t.name)));
            }
            let start = t.offset * 4;
            let end = start + t.len * 4;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("{}: payload truncated", t.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name: t.name,
                shape: t.shape,
                data,
            });
        }
        Ok(Self {
            config: header.config,
            metadata: header.metadata,
            tensors,
        })
    }

    /// Write via a temporary file and rename so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let ck = Checkpoint {
            config: None,
            metadata: serde_json::json!({"epoch": 3}),
            tensors: vec![
                NamedTensor {
                    name: "a".into(),
                    shape: vec![2, 2],
                    data: vec![1.0, -2.0, 3.5, 0.0],
                },
                NamedTensor {
                    name: "b".into(),
                    shape: vec![1],
                    data: vec![7.0],
                },
            ],
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
    }
}
