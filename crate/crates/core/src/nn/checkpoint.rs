//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "VXCK" | u32 version | u32 entry count
//! per entry: u16 name length | name (UTF-8) | u8 ndim | ndim x u32 dims | numel x f32
//! u32 metadata length | metadata (UTF-8 JSON)
//! ```

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{MiniResNet, ModelMeta};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which pipeline stage produced a set of weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Untrained,
    Source,
    Intermediate,
    Target,
}

impl StageTag {
    pub fn name(self) -> &'static str {
        match self {
            StageTag::Untrained => "untrained",
            StageTag::Source => "source",
            StageTag::Intermediate => "intermediate",
            StageTag::Target => "target",
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "untrained" => Ok(StageTag::Untrained),
            "source" => Ok(StageTag::Source),
            "intermediate" => Ok(StageTag::Intermediate),
            "target" => Ok(StageTag::Target),
            other => Err(Error::invalid(format!("unknown stage tag `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub num_classes: usize,
    pub seed: u64,
    pub stage: StageTag,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl MiniResNet {
    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            num_classes: self.num_classes,
            seed: self.meta.seed,
            stage: self.meta.stage,
        }
    }

    /// Serializes every parameter and running statistic.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let tensors = self.named_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, _, _, t) in &tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.checkpoint_meta()).expect("plain struct serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic { found: magic }.into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            }
            .into());
        }
        let count = r.u32()? as usize;
        let mut entries: HashMap<String, Tensor> = HashMap::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| CheckpointError::Malformed(format!("entry name: {e}")))?
                .to_string();
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("dims of `{name}` overflow")))?;
            let byte_len = numel
                .checked_mul(4)
                .ok_or_else(|| CheckpointError::Malformed(format!("`{name}` too large")))?;
            let raw = r.take(byte_len)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(dims, data)?;
            if entries.insert(name.clone(), tensor).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate entry `{name}`")).into());
            }
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes after metadata",
                bytes.len() - r.pos
            ))
            .into());
        }

        let mut model = MiniResNet::build(meta.num_classes, 0)
            .map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
        let mut failure: Option<CheckpointError> = None;
        model.visit_mut(|name, _, _, slot| {
            if failure.is_some() {
                return;
            }
            match entries.remove(&name) {
                None => failure = Some(CheckpointError::MissingEntry(name)),
                Some(t) if t.shape() != slot.shape() => {
                    failure = Some(CheckpointError::ShapeMismatch {
                        name,
                        found: t.shape().to_vec(),
                        expected: slot.shape().to_vec(),
                    })
                }
                Some(t) => *slot = t,
            }
        });
        if let Some(e) = failure {
            return Err(e.into());
        }
        if let Some(extra) = entries.into_keys().min() {
            return Err(CheckpointError::UnknownEntry(extra).into());
        }
        model.meta = ModelMeta {
            seed: meta.seed,
            stage: meta.stage,
        };
        Ok(model)
    }
}

pub fn save_checkpoint(model: &MiniResNet, path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = model.to_checkpoint_bytes();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Reads a checkpoint, returning the model and the exact bytes read.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MiniResNet, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = MiniResNet::from_checkpoint_bytes(&bytes)?;
    Ok((model, bytes))
}
