//! Self-validating binary container for parameter groups.
//!
//! Layout: `MAGIC`, u64 LE header length, JSON header, raw little-endian
//! tensor payload, 32-byte SHA-256 over everything before it. The digest is
//! checked before any tensor is materialized, so a corrupted file never
//! yields partial state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SVZSNAP1";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

pub struct Snapshot {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Snapshot {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_all(&mut self, prefix: &str, tensors: BTreeMap<String, Tensor>) {
        for (k, v) in tensors {
            self.tensors.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in &self.tensors {
            let offset = payload.len();
            let flat = t.flatten_all()?;
            let dtype = match t.dtype() {
                DType::F64 => {
                    for x in flat.to_vec1::<f64>()? {
                        payload.extend_from_slice(&x.to_le_bytes());
                    }
                    "f64"
                }
                DType::U32 => {
                    for x in flat.to_vec1::<u32>()? {
                        payload.extend_from_slice(&x.to_le_bytes());
                    }
                    "u32"
                }
                _ => {
                    for x in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        payload.extend_from_slice(&x.to_le_bytes());
                    }
                    "f32"
                }
            };
            entries.push(Entry {
                name: name.clone(),
                dtype: dtype.into(),
                shape: t.dims().to_vec(),
                offset,
                len: payload.len() - offset,
            });
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Snapshot(m.to_string());
        if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a snapshot file (bad magic or truncated)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch: file is corrupted"));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| bad("header length out of range"))?;
        let header: Header = serde_json::from_slice(&body[16..header_end])?;
        let payload = &body[header_end..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let raw = payload
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| bad("tensor payload out of range"))?;
            let n: usize = e.shape.iter().product();
            let t = match e.dtype.as_str() {
                "f64" => {
                    check_len(raw, n, 8)?;
                    let v: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
                }
                "f32" => {
                    check_len(raw, n, 4)?;
                    let v: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
                }
                "u32" => {
                    check_len(raw, n, 4)?;
                    let v: Vec<u32> = raw
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
                }
                other => return Err(bad(&format!("unknown dtype `{other}`"))),
            };
            tensors.insert(e.name, t);
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    /// Write via a temporary sibling file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Snapshot(format!(
                "expected a `{kind}` snapshot, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    /// Compare `meta[key]` against the expected string.
    pub fn expect_meta_str(&self, key: &str, expected: &str) -> Result<()> {
        let found = self
            .meta
            .get(key)
            .and_then(|v| v.as_str())
            .unwrap_or("<missing>");
        if found != expected {
            return Err(Error::HashMismatch {
                expected: format!("{key}={expected}"),
                found: format!("{key}={found}"),
            });
        }
        Ok(())
    }
}

fn check_len(raw: &[u8], n: usize, width: usize) -> Result<()> {
    if raw.len() != n * width {
        return Err(Error::Snapshot(
            "tensor byte length does not match shape".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Snapshot {
        let mut s = Snapshot::new("test", serde_json::json!({"hash": "abc"}));
        s.tensors.insert(
            "a.w".into(),
            Tensor::new(&[[1.5f32, -2.0], [0.25, 8.0]], &Device::Cpu).unwrap(),
        );
        s.tensors.insert(
            "b".into(),
            Tensor::new(&[1.0f64, 2.0, 3.0], &Device::Cpu).unwrap(),
        );
        s
    }

    #[test]
    fn bytes_round_trip() {
        let bytes = sample().to_bytes().unwrap();
        let back = Snapshot::from_bytes(&bytes).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(
            back.tensors["a.w"].to_vec2::<f32>().unwrap(),
            vec![vec![1.5, -2.0], vec![0.25, 8.0]]
        );
        assert_eq!(back.tensors["b"].dtype(), DType::F64);
        assert_eq!(back.group("a.").len(), 1);
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        for i in [0, 9, 20, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[i] ^= 0x41;
            assert!(Snapshot::from_bytes(&b).is_err(), "flip at {i} undetected");
        }
        assert!(Snapshot::from_bytes(&bytes[..bytes.len() - 5]).is_err());
    }

    #[test]
    fn meta_mismatch_is_a_hash_error() {
        let s = sample();
        assert!(s.expect_meta_str("hash", "abc").is_ok());
        assert!(matches!(
            s.expect_meta_str("hash", "xyz"),
            Err(Error::HashMismatch { .. })
        ));
    }
}
