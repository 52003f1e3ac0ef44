//! Binary checkpoint container.
//!
//! Layout: magic `NDCK`, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as contiguous little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{EpochMetrics, TrainConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NDCK";
pub const VERSION: u32 = 1;

/// Upper bound on header size and tensor rank accepted by the decoder.
const MAX_HEADER: u64 = 64 << 20;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed training epochs.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    /// Training-sample ids, one per latent code row.
    pub code_ids: Vec<String>,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    history: Vec<EpochMetrics>,
    code_ids: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            code_ids: self.code_ids.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let data_len: usize = self.tensors.values().map(|t| t.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + data_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing NDCK magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let rest = &bytes[16..];
        if header_len > MAX_HEADER || header_len > rest.len() as u64 {
            return Err(bad("header length exceeds file"));
        }
        let (json, mut data) = rest.split_at(header_len as usize);
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        header.config.validate().map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
        if header.history.len() != header.epoch {
            return Err(Error::Checkpoint(format!(
                "history has {} rows for {} completed epochs",
                header.history.len(),
                header.epoch
            )));
        }
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            if entry.shape.len() > MAX_RANK {
                return Err(Error::Checkpoint(format!("{}: rank {} too large", entry.name, entry.shape.len())));
            }
            let count = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|c| c.checked_mul(8).is_some_and(|b| b <= data.len()))
                .ok_or_else(|| Error::Checkpoint(format!("{}: data truncated", entry.name)))?;
            let (chunk, tail) = data.split_at(count * 8);
            data = tail;
            let values = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("length checked");
            if tensors.insert(entry.name.clone(), arr).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", entry.name)));
            }
        }
        if !data.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
        }
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            history: header.history,
            code_ids: header.code_ids,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename so an interrupted save never leaves a truncated checkpoint
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }
}
