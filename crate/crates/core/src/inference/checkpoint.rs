//! `.sck` checkpoint container.
//!
//! ```text
//! "SCK1"        4 bytes
//! version       u32
//! header length u64
//! header        JSON: config, growth, normalization, metadata, tensor directory
//! payload       little-endian f64 tensors at the directory's byte offsets
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::PopNorm;
use crate::error::{Error, Result};
use crate::model::{GrowthState, ModelConfig, Scalae};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    growth: GrowthState,
    pop_norm: PopNorm,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// A model with the normalization constants it was trained under.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Scalae,
    pub pop_norm: PopNorm,
    /// Free-form provenance; never holds timestamps so saves are reproducible.
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: Scalae, pop_norm: PopNorm) -> Self {
        Self {
            model,
            pop_norm,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut tensors = Vec::new();
        for (_, p) in self.model.params().iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            });
            offset += 8 * p.value.numel() as u64;
        }
        let header = Header {
            config: self.model.config().clone(),
            growth: self.model.growth(),
            pop_norm: self.pop_norm,
            metadata: self.metadata.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.model.params().iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let payload_start = usize::try_from(hlen)
            .ok()
            .and_then(|h| h.checked_add(16))
            .filter(|end| *end <= bytes.len())
            .ok_or_else(|| Error::Format(format!("header length {hlen} exceeds file size {}", bytes.len())))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        header.pop_norm.validate().map_err(|e| Error::Format(format!("checkpoint normalization: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut named = Vec::with_capacity(header.tensors.len());
        let mut expected_end = 0u64;
        for t in header.tensors {
            let numel = t.shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
            let len = numel.and_then(|n| n.checked_mul(8));
            let range = len.and_then(|l| {
                let start = usize::try_from(t.offset).ok()?;
                Some(start..start.checked_add(l)?)
            });
            let range = range
                .filter(|r| r.end <= payload.len())
                .ok_or_else(|| Error::Format(format!("tensor {} lies outside the payload", t.name)))?;
            expected_end = expected_end.max(range.end as u64);
            let data = payload[range]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            named.push((t.name.clone(), Tensor::new(t.shape, data).map_err(|e| Error::Format(e.to_string()))?));
        }
        if expected_end != payload.len() as u64 {
            return Err(Error::Format(format!(
                "payload is {} bytes, directory covers {expected_end}",
                payload.len()
            )));
        }
        let model = Scalae::from_parameters(header.config, header.growth, named).map_err(|e| match e {
            Error::Contract(m) => Error::Format(m),
            other => other,
        })?;
        Ok(Self {
            model,
            pop_norm: header.pop_norm,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Short content hash identifying this checkpoint.
    pub fn id(&self) -> Result<String> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_bytes()? {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Ok(format!("{h:016x}"))
    }
}
