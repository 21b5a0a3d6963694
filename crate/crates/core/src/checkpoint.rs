//! Versioned checkpoint files.
//!
//! Layout: 8 magic bytes, format version (u32 LE), header length (u64 LE),
//! a JSON header with the model config, a parameter manifest and free-form
//! metadata, then every parameter as little-endian f32 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VelocityNet};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"FLOWSEG\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    params: Vec<ParamEntry>,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    /// Training metadata (flow settings, iteration count, ...).
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_net<T: Scalar>(net: &VelocityNet<T>, meta: serde_json::Value) -> Self {
        Self {
            model: net.config().clone(),
            params: net.params().cast(),
            meta,
        }
    }

    pub fn into_net(self) -> Result<VelocityNet<f32>> {
        VelocityNet::from_params(self.model, self.params)
    }

    pub fn manifest(&self) -> Vec<ParamEntry> {
        let mut offset = 0;
        self.params
            .iter()
            .map(|p| {
                let e = ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    offset,
                };
                offset += p.value.numel();
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            params: self.manifest(),
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(24 + header.len() + 4 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic bytes)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let payload = &bytes[20 + hlen..];
        if !payload.len().is_multiple_of(4) {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut params = ParamStore::new();
        let mut expected = 0;
        for e in &header.params {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + n > floats.len() {
                return Err(Error::Checkpoint(format!("parameter `{}` has an inconsistent offset", e.name)));
            }
            params.add(e.name.clone(), Tensor::new(&e.shape, floats[e.offset..e.offset + n].to_vec())?);
            expected += n;
        }
        if expected != floats.len() {
            return Err(Error::Checkpoint(format!(
                "payload holds {} values, manifest describes {expected}",
                floats.len()
            )));
        }
        Ok(Self {
            model: header.model,
            params,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
