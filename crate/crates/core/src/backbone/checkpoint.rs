//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"CQKL"
//! version  u32
//! header   u64 length, then UTF-8 JSON {"config": ModelConfig, "meta": any}
//! count    u64
//! records  count × { u32 name length, name bytes, u32 ndim, ndim × u64 extent,
//!                    product(extents) × f64 }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::Model;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"CQKL";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on a single record's element count, guarding corrupt files.
const MAX_RECORD_LEN: u64 = 1 << 34;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Model configuration, free-form metadata and named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: serde_json::Value,
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of a model's parameters under their layout names.
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            config: model.config().clone(),
            meta: serde_json::Value::Null,
            records: model.named_params().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn record(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuild the model; every layout parameter must be present.
    pub fn to_model(&self) -> Result<Model> {
        let layout = super::params::ParamLayout::new(&self.config);
        let params = layout
            .specs
            .iter()
            .map(|s| {
                self.record(&s.name)
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {}", s.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Model::from_params(self.config.clone(), params)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Format(format!("write failed: {e}"));
        let header = serde_json::to_vec(&Header { config: self.config.clone(), meta: self.meta.clone() })?;
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        w.write_all(&(self.records.len() as u64).to_le_bytes()).map_err(io)?;
        for (name, t) in &self.records {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&(t.ndim() as u32).to_le_bytes()).map_err(io)?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes()).map_err(io)?;
            }
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = read_u64(&mut r)?;
        let header: Header = serde_json::from_slice(&read_vec(&mut r, hlen)?)?;
        let count = read_u64(&mut r)?;
        let mut records = Vec::new();
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as u64;
            let name = String::from_utf8(read_vec(&mut r, nlen)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)?;
            if ndim > 8 {
                return Err(Error::Format(format!("{name}: {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| read_u64(&mut r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1u64, |acc, &e| acc.checked_mul(e as u64));
            let n = match n {
                Some(n) if n <= MAX_RECORD_LEN => n,
                _ => return Err(Error::Format(format!("{name}: record shape {shape:?} too large"))),
            };
            let bytes = read_vec(&mut r, n * 8)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            records.push((name, Tensor::new(&shape, data)?));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::Format(e.to_string()))? != 0 {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Checkpoint { config: header.config, meta: header.meta, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_vec<R: Read>(r: &mut R, len: u64) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let got = r.take(len).read_to_end(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    if got as u64 != len {
        return Err(Error::Format(format!("truncated checkpoint: wanted {len} bytes, got {got}")));
    }
    Ok(buf)
}
