//! Checkpoint file: `VSCKPT01`, little-endian u64 manifest length, JSON
//! manifest, then every array's f32 payload back to back (little-endian) in
//! manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VSCKPT01";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
}

/// Named parameters, optional Adam state, model config and training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub params: Vec<NamedArray>,
    pub optimizer: Option<OptimizerMeta>,
    /// First and second moments, same names and order as `params`.
    pub moments: Option<(Vec<NamedArray>, Vec<NamedArray>)>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: serde_json::Value,
    meta: serde_json::Value,
    optimizer: Option<OptimizerMeta>,
    arrays: Vec<ArrayEntry>,
}

const PARAM: &str = "param/";
const MOMENT1: &str = "adam_m/";
const MOMENT2: &str = "adam_v/";

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut all: Vec<(String, &NamedArray)> = self
            .params
            .iter()
            .map(|a| (format!("{PARAM}{}", a.name), a))
            .collect();
        if let Some((m, v)) = &self.moments {
            all.extend(m.iter().map(|a| (format!("{MOMENT1}{}", a.name), a)));
            all.extend(v.iter().map(|a| (format!("{MOMENT2}{}", a.name), a)));
        }
        let mut offset = 0;
        let arrays = all
            .iter()
            .map(|(name, a)| {
                let e = ArrayEntry {
                    name: name.clone(),
                    shape: a.shape.clone(),
                    dtype: "f32".into(),
                    offset,
                    len: a.data.len(),
                };
                offset += a.data.len() * 4;
                e
            })
            .collect();
        let manifest = Manifest {
            config: self.config.clone(),
            meta: self.meta.clone(),
            optimizer: self.optimizer.clone(),
            arrays,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in &all {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + mlen)
            .ok_or_else(|| Error::Format("truncated checkpoint manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)
            .map_err(|e| Error::Format(format!("bad checkpoint manifest: {e}")))?;
        let payload = &bytes[16 + mlen..];
        let expected: usize = manifest.arrays.iter().map(|a| a.len * 4).sum();
        if payload.len() != expected {
            return Err(Error::Length {
                expected,
                found: payload.len(),
            });
        }
        let (mut params, mut m1, mut m2) = (Vec::new(), Vec::new(), Vec::new());
        for e in manifest.arrays {
            if e.dtype != "f32" {
                return Err(Error::Format(format!("unsupported dtype {}", e.dtype)));
            }
            if e.shape.iter().product::<usize>() != e.len || e.offset + e.len * 4 > payload.len() {
                return Err(Error::Format(format!("inconsistent entry for {}", e.name)));
            }
            let data = payload[e.offset..e.offset + e.len * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let (bucket, name) = if let Some(n) = e.name.strip_prefix(PARAM) {
                (&mut params, n)
            } else if let Some(n) = e.name.strip_prefix(MOMENT1) {
                (&mut m1, n)
            } else if let Some(n) = e.name.strip_prefix(MOMENT2) {
                (&mut m2, n)
            } else {
                return Err(Error::Format(format!("unknown array {}", e.name)));
            };
            bucket.push(NamedArray {
                name: name.to_string(),
                shape: e.shape,
                data,
            });
        }
        let moments = match (m1.is_empty(), m2.is_empty()) {
            (true, true) => None,
            (false, false) if m1.len() == params.len() && m2.len() == params.len() => Some((m1, m2)),
            _ => return Err(Error::Format("incomplete optimizer moments".into())),
        };
        Ok(Checkpoint {
            config: manifest.config,
            meta: manifest.meta,
            params,
            optimizer: manifest.optimizer,
            moments,
        })
    }
}

pub fn write_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, c.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
