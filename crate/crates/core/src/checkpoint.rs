//! Checkpoint files: a JSON header describing a named tensor collection,
//! followed by little-endian `f32` data.
//!
//! ```text
//! offset 0   4 bytes   magic "LDDC"
//! offset 4   1 byte    version (1)
//! offset 5   4 bytes   u32 header length L
//! offset 9   L bytes   UTF-8 JSON CheckpointHeader
//! offset 9+L ...       f32le data; tensor i occupies [offset_i, offset_i + numel_i) floats
//! ```
//!
//! Parameters are held in `f64` in memory and stored as `f32`; loading a
//! checkpoint therefore yields the `f32`-rounded values, and re-saving a
//! loaded checkpoint reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LddmError, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::video::{read_f32_payload, split_container};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LDDC";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// Model kind: `encoder`, `decoder`, `denoiser`, `classifier`, `latents`.
    pub kind: String,
    /// Architecture description, interpreted by the owning model.
    pub arch: serde_json::Value,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub arch: serde_json::Value,
    pub extra: BTreeMap<String, serde_json::Value>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(kind: &str, arch: serde_json::Value, params: ParamStore) -> Self {
        Self {
            kind: kind.into(),
            arch,
            extra: BTreeMap::new(),
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&CheckpointHeader {
            kind: self.kind.clone(),
            arch: self.arch.clone(),
            extra: self.extra.clone(),
            tensors,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(9 + header.len() + offset * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) =
            split_container(bytes, CHECKPOINT_MAGIC, "LDDC", CHECKPOINT_VERSION)?;
        let h: CheckpointHeader = serde_json::from_slice(header)
            .map_err(|e| LddmError::MalformedHeader(e.to_string()))?;
        let mut expected_offset = 0usize;
        for e in &h.tensors {
            if e.offset != expected_offset {
                return Err(LddmError::MalformedHeader(format!(
                    "tensor {} at offset {}, expected {expected_offset}",
                    e.name, e.offset
                )));
            }
            let n = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| LddmError::MalformedHeader(format!("tensor {} too large", e.name)))?;
            expected_offset = expected_offset
                .checked_add(n)
                .filter(|&total| total <= payload.len() / 4)
                .ok_or_else(|| LddmError::TruncatedPayload {
                    expected: expected_offset.saturating_add(n).saturating_mul(4),
                    found: payload.len(),
                })?;
        }
        let data = read_f32_payload(payload, expected_offset)?;
        let mut params = ParamStore::new();
        for e in &h.tensors {
            if params.get(&e.name).is_some() {
                return Err(LddmError::MalformedHeader(format!(
                    "duplicate tensor name {}",
                    e.name
                )));
            }
            let n: usize = e.shape.iter().product();
            let values: Vec<f64> = data[e.offset..e.offset + n]
                .iter()
                .map(|&v| v as f64)
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(LddmError::MalformedHeader(format!(
                    "tensor {} holds non-finite values",
                    e.name
                )));
            }
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?);
        }
        Ok(Self {
            kind: h.kind,
            arch: h.arch,
            extra: h.extra,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks the model kind.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.kind != kind {
            return Err(LddmError::MalformedHeader(format!(
                "expected a {kind} checkpoint, found {}",
                c.kind
            )));
        }
        Ok(c)
    }

    pub fn arch_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.arch.clone())
            .map_err(|e| LddmError::MalformedHeader(format!("architecture: {e}")))
    }
}
