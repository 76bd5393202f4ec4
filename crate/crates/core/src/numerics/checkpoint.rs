//! Parameter checkpoints: an 8-byte magic, a little-endian `u32` version,
//! a `u64` header length, a JSON index header, then every tensor's data in
//! index order as little-endian floats of the header's `dtype`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"UI2VCKPT";

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    params: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    /// Free-form metadata, typically the model configuration.
    pub meta: serde_json::Value,
}

pub fn write_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    params: &ParamStore<T>,
    meta: &serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let mut offset = 0;
    let entries = params
        .iter()
        .map(|(_, name, t)| {
            let e = Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            };
            offset += t.len();
            e
        })
        .collect();
    let header = Header {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.to_string(),
        params: entries,
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Invalid(e.to_string()))?;
    let width = if T::DTYPE == "f32" { 4 } else { 8 };
    let mut buf = Vec::with_capacity(20 + header.len() + offset * width);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, _, t) in params.iter() {
        for &x in t.data() {
            if width == 4 {
                buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let loc = path.display().to_string();
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::parse(loc, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version as u64,
            expected: CHECKPOINT_VERSION as u64,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| Error::parse(&loc, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::parse(&loc, e))?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::parse(&loc, format!("unknown dtype {other}"))),
    };
    let data = &bytes[20 + hlen..];
    let mut params = ParamStore::new();
    for e in header.params {
        let start = e.offset * width;
        let end = start + e.len * width;
        let raw = data
            .get(start..end)
            .ok_or_else(|| Error::parse(&loc, format!("truncated data for {}", e.name)))?;
        let values = raw
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                } else {
                    T::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                }
            })
            .collect();
        params.add(e.name, Tensor::new(e.shape, values)?)?;
    }
    Ok(Checkpoint {
        params,
        meta: header.meta,
    })
}
