//! Named-tensor container.
//!
//! Layout (little-endian): magic `MFNN`, version `u32`, metadata length `u32` and
//! JSON bytes, tensor count `u32`, then per tensor: name length `u32`, UTF-8 name,
//! dtype `u8` (0 = f32, 1 = f64), rank `u32`, dims `u32` each, payload.

use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use super::{DifferentiableField, FieldError, FieldNetwork, NetworkConfig, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFNN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointDtype {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> FieldError {
    FieldError::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    /// All tensors named `prefix/<name>` for the given names, in order.
    pub fn group(&self, prefix: &str, names: &[String]) -> Result<Vec<Tensor>> {
        names
            .iter()
            .map(|n| self.get(&format!("{prefix}/{n}")).cloned())
            .collect()
    }

    pub fn write_to(&self, w: &mut impl Write, dtype: CheckpointDtype) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[match dtype {
                CheckpointDtype::F32 => 0u8,
                CheckpointDtype::F64 => 1u8,
            }])?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for &v in t.data() {
                match dtype {
                    CheckpointDtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                    CheckpointDtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                }
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = read_u32(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta: Value = serde_json::from_slice(&meta)?;
        let count = read_u32(r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let width = match tag[0] {
                0 => 4,
                1 => 8,
                t => return Err(bad(format!("tensor `{name}`: unknown dtype tag {t}"))),
            };
            let rank = read_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * width];
            r.read_exact(&mut bytes)?;
            let data = if width == 4 {
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect()
            } else {
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path, dtype: CheckpointDtype) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w, dtype)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }

    /// Network weights, embedding frequencies and (optionally) an EMA copy.
    pub fn from_network(net: &FieldNetwork, ema: Option<&[Tensor]>) -> Self {
        let mut ck = Self::new(serde_json::json!({
            "network": net.config(),
            "dim": DifferentiableField::dim(net),
        }));
        let names = net.param_names();
        for (n, t) in names.iter().zip(net.params()) {
            ck.push(format!("param/{n}"), t.clone());
        }
        if let Some(ema) = ema {
            for (n, t) in names.iter().zip(ema) {
                ck.push(format!("ema/{n}"), t.clone());
            }
        }
        ck.push("embed/freq_t", net.freq_t().clone());
        ck.push("embed/freq_span", net.freq_span().clone());
        ck
    }

    fn network_header(&self) -> Result<(NetworkConfig, usize)> {
        let cfg: NetworkConfig = serde_json::from_value(
            self.meta
                .get("network")
                .cloned()
                .ok_or_else(|| bad("metadata lacks `network`"))?,
        )?;
        let dim = self
            .meta
            .get("dim")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("metadata lacks `dim`"))? as usize;
        Ok((cfg, dim))
    }

    /// Rebuilds the network from the `prefix` group (`param` or `ema`).
    pub fn to_network(&self, prefix: &str) -> Result<FieldNetwork> {
        let (cfg, dim) = self.network_header()?;
        let names = FieldNetwork::new(&cfg, dim, 0)?.param_names();
        let params = self.group(prefix, &names)?;
        FieldNetwork::from_parts(
            &cfg,
            dim,
            params,
            self.get("embed/freq_t")?.clone(),
            self.get("embed/freq_span")?.clone(),
        )
    }

    /// EMA weights when present, raw weights otherwise.
    pub fn inference_network(&self) -> Result<FieldNetwork> {
        if self.tensors.iter().any(|(n, _)| n.starts_with("ema/")) {
            self.to_network("ema")
        } else {
            self.to_network("param")
        }
    }
}
