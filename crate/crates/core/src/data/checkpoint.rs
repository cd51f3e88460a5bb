//! `PSC1` checkpoints.
//!
//! Layout: magic `PSC1`, little-endian `u32` version, `u32` header length,
//! a JSON header (model config plus a manifest of named tensors with shape,
//! dtype and payload offset), then the concatenated little-endian tensor
//! payloads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSC1";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorDtype {
    F32,
    F64,
}

impl TensorDtype {
    fn width(self) -> u64 {
        match self {
            TensorDtype::F32 => 4,
            TensorDtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: TensorDtype,
    /// Byte offset from the start of the payload section.
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecord>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<SegModel> {
        SegModel::from_params(self.config, self.params)
    }
}

/// Serialises a config and parameter set; tensors are written as f64.
pub fn encode_checkpoint(config: &ModelConfig, params: &ParamStore) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut payload = Vec::new();
    for (name, t) in params.iter() {
        tensors.push(TensorRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: TensorDtype::F64,
            offset: payload.len() as u64,
            trainable: t.requires_grad(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config: config.clone(),
        tensors,
    })?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::Config("checkpoint header too large".into()))?;
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected PSC1".into(),
        });
    }
    if bytes.len() < PREFIX_LEN {
        return Err(Error::Truncated {
            offset: 4,
            expected: PREFIX_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as u64;
    let rest = (bytes.len() - PREFIX_LEN) as u64;
    if header_len > rest {
        return Err(Error::Truncated {
            offset: PREFIX_LEN as u64,
            expected: header_len,
            actual: rest,
        });
    }
    let header_end = PREFIX_LEN + header_len as usize;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[PREFIX_LEN..header_end]).map_err(|e| Error::Format {
        offset: PREFIX_LEN as u64,
        msg: format!("invalid header: {e}"),
    })?;
    let payload = &bytes[header_end..];
    let mut params = ParamStore::new();
    for rec in &header.tensors {
        let count = rec
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| Error::Format {
                offset: PREFIX_LEN as u64,
                msg: format!("shape overflow for `{}`", rec.name),
            })?;
        let len = count.checked_mul(rec.dtype.width());
        let end = len.and_then(|l| rec.offset.checked_add(l));
        let Some(end) = end.filter(|&e| e <= payload.len() as u64) else {
            return Err(Error::Truncated {
                offset: header_end as u64 + rec.offset,
                expected: len.unwrap_or(u64::MAX),
                actual: (payload.len() as u64).saturating_sub(rec.offset),
            });
        };
        let raw = &payload[rec.offset as usize..end as usize];
        let data: Vec<f64> = match rec.dtype {
            TensorDtype::F64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
            TensorDtype::F32 => raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        let t = Tensor::new(&rec.shape, data)?.with_requires_grad(rec.trainable);
        params.insert(rec.name.clone(), t)?;
    }
    Ok(Checkpoint {
        config: header.config,
        params,
    })
}

pub fn save_checkpoint(path: &Path, model: &SegModel) -> Result<()> {
    super::write_file(path, &encode_checkpoint(model.config(), model.params())?)
}

pub fn load_checkpoint(path: &Path) -> Result<SegModel> {
    decode_checkpoint(&super::read_file(path)?)?.into_model()
}
