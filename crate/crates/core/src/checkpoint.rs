//! Named-array container shared by codec and transformer checkpoints.
//!
//! Layout: the 8 magic bytes `CELDCKP1`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every array as little-endian `f32` in header
//! order. The header lists `{name, shape, dtype, offset}` per array (offset in
//! elements from the start of the data section) plus a free-form `meta` object
//! holding hyperparameters.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"CELDCKP1";

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arrays: Vec<ArrayEntry>,
    meta: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub meta: Value,
}

impl Checkpoint {
    pub fn new(params: ParamSet, meta: Value) -> Self {
        Self { params, meta }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            arrays.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            });
            offset += t.numel();
        }
        let header = serde_json::to_vec(&Header {
            arrays,
            meta: self.meta.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Parse(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        let data = &bytes[16 + hlen..];
        let mut params = ParamSet::new();
        for a in header.arrays {
            if a.dtype != "f32" {
                return Err(bad(&format!("unsupported dtype {}", a.dtype)));
            }
            let n: usize = a.shape.iter().product();
            let raw = data
                .get(a.offset * 4..(a.offset + n) * 4)
                .ok_or_else(|| bad(&format!("array `{}` out of bounds", a.name)))?;
            let vals = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(a.name, Tensor::from_vec(&a.shape, vals)?);
        }
        Ok(Self {
            params,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::load(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::load(path, e))
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_arrays_and_meta() {
        let mut p = ParamSet::new();
        p.insert("base/w", Tensor::from_vec(&[2, 3], vec![1., -2., 3.5, 0., 1e-7, -0.0]).unwrap());
        p.insert("adapter/e", Tensor::full(&[4], 0.25));
        let ck = Checkpoint::new(p, serde_json::json!({"kind": "test", "f": 4}));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupt_input_is_an_error() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let ck = Checkpoint::new(
            {
                let mut p = ParamSet::new();
                p.insert("x", Tensor::zeros(&[8]));
                p
            },
            Value::Null,
        );
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }
}
