//! Named-tensor checkpoint files.
//!
//! Layout: an 8-byte little-endian header length `n`, `n` bytes of UTF-8
//! JSON, then the tensor payload as little-endian `f64`. The header is
//!
//! ```json
//! {"meta": {...}, "tensors": [{"name": "...", "shape": [..], "offset": 0}]}
//! ```
//!
//! where `offset` is the byte offset of the tensor within the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.numel() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 8 {
            return Err("file shorter than its length prefix".into());
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes.get(8..8 + n).ok_or("truncated header")?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| format!("bad header: {e}"))?;
        let payload = &bytes[8 + n..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = payload
                .get(start..start + 8 * count)
                .ok_or_else(|| format!("tensor {} runs past the end of the file", e.name))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 0..40), split in 0usize..40) {
            let split = split.min(values.len());
            let ck = Checkpoint {
                meta: serde_json::json!({"iteration": 7}),
                tensors: vec![
                    ("a".into(), Tensor::from_vec(values[..split].to_vec())),
                    ("b".into(), Tensor::new([1, values.len() - split], values[split..].to_vec())),
                ],
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn header_is_readable_json() {
        let ck = Checkpoint {
            meta: serde_json::json!({}),
            tensors: vec![
                ("w".into(), Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0])),
                ("b".into(), Tensor::from_vec(vec![5.0])),
            ],
        };
        let bytes = ck.to_bytes();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(header["tensors"][1]["offset"], 32);
        assert_eq!(header["tensors"][0]["shape"], serde_json::json!([2, 2]));
        assert_eq!(bytes.len(), 8 + n + 5 * 8);
        assert_eq!(&bytes[8 + n..8 + n + 8], &1.0f64.to_le_bytes());
    }

    #[test]
    fn truncated_file_rejected() {
        let ck = Checkpoint {
            meta: serde_json::json!({}),
            tensors: vec![("w".into(), Tensor::from_vec(vec![1.0; 4]))],
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..4]).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = Checkpoint {
            meta: serde_json::json!({"k": 1}),
            tensors: vec![("x".into(), Tensor::scalar(2.5))],
        };
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(!dir.path().join("model.ckpt.tmp").exists());
    }
}
