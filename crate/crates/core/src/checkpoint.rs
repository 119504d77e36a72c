//! Binary checkpoint container shared by language models and classifiers.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "BOLTCKPT"
//! version  u32       FORMAT_VERSION
//! hlen     u64       length of the JSON header in bytes
//! header   hlen      UTF-8 JSON: {"kind", "meta", "tensors": [{"name", "shape"}]}
//! data     ...       each tensor's values as f64, in header order
//! ```
//!
//! Values are stored bit-for-bit, so a save/load round trip is exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BOLTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub struct Checkpoint<M> {
    pub kind: String,
    pub meta: M,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode<M: Serialize>(kind: &str, meta: &M, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let header = Header {
        kind: kind.to_string(),
        meta: serde_json::to_value(meta)?,
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let n_values: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * n_values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8], expected_kind: &str) -> Result<Checkpoint<M>> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    if header.kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "expected a `{expected_kind}` checkpoint, found `{}`",
            header.kind
        )));
    }
    let mut data = &body[hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        if data.len() < n * 8 {
            return Err(Error::Checkpoint(format!("truncated data for tensor {}", entry.name)));
        }
        let values = data[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[n * 8..];
        tensors.push((entry.name, Tensor::new(entry.shape, values)?));
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint {
        kind: header.kind,
        meta: serde_json::from_value(header.meta)?,
        tensors,
    })
}

pub fn save<M: Serialize>(path: &Path, kind: &str, meta: &M, tensors: &[(String, &Tensor)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode(kind, meta, tensors)?)?;
    Ok(())
}

pub fn load<M: DeserializeOwned>(path: &Path, expected_kind: &str) -> Result<Checkpoint<M>> {
    decode(&fs::read(path)?, expected_kind)
}
