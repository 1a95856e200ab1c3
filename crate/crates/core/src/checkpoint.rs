//! Self-describing binary container for model parameters.
//!
//! Layout: `b"SISTACKP"`, `u32` version, `u64` header length, JSON header,
//! raw little-endian tensor data in header order, then a SHA-256 of all
//! preceding bytes.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"SISTACKP";
pub const FORMAT_VERSION: u32 = 1;

/// Adapters the loader understands. External pretrained formats plug in here.
pub const KNOWN_ADAPTERS: &[&str] = &["toy"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Generator,
    Discriminator,
    Classifier,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub kind: ModelKind,
    pub dtype: String,
    pub arch: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn encode<S: Scalar, A: Serialize>(kind: ModelKind, arch: &A, params: &ParamSet<S>) -> Result<Vec<u8>> {
    let header = Header {
        version: FORMAT_VERSION,
        kind,
        dtype: S::DTYPE.to_string(),
        arch: serde_json::to_value(arch)?,
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(header.len() + params.num_scalars() * S::width() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in params.iter() {
        for &v in t.iter() {
            v.append_le_bytes(&mut out);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn unsupported(found: impl Into<String>) -> Error {
    Error::UnsupportedFormat {
        found: found.into(),
        known: KNOWN_ADAPTERS.iter().map(|s| s.to_string()).collect(),
    }
}

fn read_values<T: Scalar, S: Scalar>(bytes: &[u8], n: usize) -> Vec<S> {
    bytes
        .chunks_exact(T::width())
        .take(n)
        .map(|ch| S::from_f64_lossy(T::read_le(ch).to_f64().unwrap_or(f64::NAN)))
        .collect()
}

/// Parses a container, converting stored values into `S`.
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<(Header, ParamSet<S>)> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(unsupported("unrecognised file signature"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(unsupported("toy container with corrupt payload (checksum mismatch)"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(unsupported(format!("toy container version {version}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let hend = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| unsupported("truncated header"))?;
    let header: Header = serde_json::from_slice(&body[20..hend]).map_err(|_| unsupported("unreadable header"))?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(unsupported(format!("toy container with dtype {other}"))),
    };
    let mut params = ParamSet::new();
    let mut off = hend;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let end = off + n * width;
        if end > body.len() {
            return Err(unsupported("truncated tensor data"));
        }
        let chunk = &body[off..end];
        let vals: Vec<S> = if width == 4 {
            read_values::<f32, S>(chunk, n)
        } else {
            read_values::<f64, S>(chunk, n)
        };
        params.push(
            e.name.clone(),
            ArrayD::from_shape_vec(IxDyn(&e.shape), vals).map_err(|_| unsupported("bad tensor shape"))?,
        );
        off = end;
    }
    if off != body.len() {
        return Err(unsupported("trailing bytes after tensor data"));
    }
    Ok((header, params))
}

pub fn save<S: Scalar, A: Serialize>(path: &Path, kind: ModelKind, arch: &A, params: &ParamSet<S>) -> Result<()> {
    let bytes = encode(kind, arch, params)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a container through the named adapter.
pub fn load<S: Scalar>(path: &Path, adapter: &str) -> Result<(Header, ParamSet<S>)> {
    if !KNOWN_ADAPTERS.contains(&adapter) {
        return Err(unsupported(format!("adapter `{adapter}`")));
    }
    let bytes = fs::read(path)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.push(
            "a",
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, -2.0, 3.5, 0.25]).unwrap(),
        );
        p.push("b", ArrayD::from_elem(IxDyn(&[3]), 7.0));
        p
    }

    #[test]
    fn round_trip_preserves_values() {
        let p = sample();
        let bytes = encode(ModelKind::Classifier, &serde_json::json!({"x": 1}), &p).unwrap();
        let (h, q) = decode::<f32>(&bytes).unwrap();
        assert_eq!(h.kind, ModelKind::Classifier);
        assert_eq!(p, q);
        let (_, wide) = decode::<f64>(&bytes).unwrap();
        assert_eq!(wide.tensor(0)[[1, 0]], 3.5);
    }

    #[test]
    fn flipped_byte_is_rejected() {
        let mut bytes = encode(ModelKind::Classifier, &(), &sample()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        match decode::<f32>(&bytes) {
            Err(Error::UnsupportedFormat { known, .. }) => assert_eq!(known, vec!["toy".to_string()]),
            other => panic!("expected unsupported format, got {other:?}"),
        }
    }

    #[test]
    fn unknown_adapter_lists_known_ones() {
        let err = load::<f32>(Path::new("/nonexistent"), "stylegan2-pkl").unwrap_err();
        assert!(err.to_string().contains("toy"), "{err}");
    }
}
