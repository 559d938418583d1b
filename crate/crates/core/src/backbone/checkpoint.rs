//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "FRETALCK"
//! version  u32
//! hlen     u64      length of the JSON header
//! header   hlen bytes of UTF-8 JSON (CheckpointHeader)
//! body     f32 values of every parameter, in header order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, ModelHandle, Param};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FRETALCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub source_domain: Option<String>,
    pub epoch: Option<usize>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    fingerprint: String,
    architecture: Architecture,
    trainable: bool,
    parameter_hash: String,
    metadata: TrainingMetadata,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelHandle,
    pub metadata: TrainingMetadata,
}

impl Checkpoint {
    pub fn new(model: ModelHandle, metadata: TrainingMetadata) -> Self {
        Self { model, metadata }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            fingerprint: self.model.architecture().fingerprint(),
            architecture: self.model.architecture().clone(),
            trainable: self.model.is_trainable(),
            parameter_hash: self.model.parameter_hash(),
            metadata: self.metadata.clone(),
            params: self
                .model
                .params()
                .iter()
                .map(|p| ParamEntry { name: p.name.clone(), shape: p.shape.clone() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * self.model.num_parameters());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.params() {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..body_start])?;
        if header.architecture.fingerprint() != header.fingerprint {
            return Err(Error::Checkpoint(format!(
                "architecture fingerprint mismatch: stored {}, computed {}",
                header.fingerprint,
                header.architecture.fingerprint()
            )));
        }
        let mut body = &bytes[body_start..];
        let mut params = Vec::with_capacity(header.params.len());
        for entry in header.params {
            let len: usize = entry.shape.iter().product();
            if body.len() < 4 * len {
                return Err(Error::Checkpoint(format!("truncated data for {}", entry.name)));
            }
            let data = body[..4 * len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            body = &body[4 * len..];
            params.push(Param { name: entry.name, shape: entry.shape, data });
        }
        if !body.is_empty() {
            return Err(bad("trailing bytes after parameter data"));
        }
        let model = ModelHandle::from_parts(header.architecture, params, header.trainable)?;
        if model.parameter_hash() != header.parameter_hash {
            return Err(bad("parameter hash mismatch"));
        }
        Ok(Self { model, metadata: header.metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads and additionally requires a specific architecture.
    pub fn load_expecting(path: &Path, arch: &Architecture) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.model.architecture().fingerprint() != arch.fingerprint() {
            return Err(Error::IncompatibleArchitecture(format!(
                "{} holds architecture {}, expected {}",
                path.display(),
                ck.model.architecture().fingerprint(),
                arch.fingerprint()
            )));
        }
        Ok(ck)
    }
}
