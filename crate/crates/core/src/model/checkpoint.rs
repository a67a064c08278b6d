//! `MCKP` checkpoint files.
//!
//! ```text
//! "MCKP" | version: u32
//! config block: byte length u32 | JSON-encoded CheckpointMeta
//! tensor count: u32
//! per tensor, in declaration order:
//!   name length u32 | name bytes | rank u32 | dims u32 * rank
//!   values: f32 little-endian * product(dims)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Params};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub step: u64,
    /// SHA-256 of the dataset container the parameters were trained on.
    #[serde(default)]
    pub dataset_sha256: Option<String>,
    #[serde(default)]
    pub clip: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Params,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        reason: reason.into(),
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    if ckpt.meta.model != *ckpt.params.config() {
        return Err(Error::Consistency(
            "checkpoint metadata and parameters disagree on the model config".into(),
        ));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&ckpt.meta)?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    let layout = ckpt.params.config().layout();
    out.extend_from_slice(&(layout.tensors.len() as u32).to_le_bytes());
    for t in &layout.tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &dim in &t.shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &ckpt.params.as_slice()[t.range()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| bad(format!("config block: {e}")))?;
    meta.model.validate()?;
    let layout = meta.model.layout();
    let count = r.u32()? as usize;
    if count != layout.tensors.len() {
        return Err(bad(format!(
            "{count} tensors stored, config implies {}",
            layout.tensors.len()
        )));
    }
    let mut values = Vec::with_capacity(layout.len);
    for spec in &layout.tensors {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        if name != spec.name {
            return Err(bad(format!("expected tensor {}, found {name}", spec.name)));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != spec.shape {
            return Err(bad(format!("tensor {name} has shape {dims:?}, expected {:?}", spec.shape)));
        }
        for chunk in r.take(4 * spec.len())?.chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    let params = Params::unflatten(meta.model, values)?;
    Ok(Checkpoint { meta, params })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let bytes = encode_checkpoint(ckpt)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            hidden_dim: 6,
            ..ModelConfig::default()
        };
        Checkpoint {
            meta: CheckpointMeta {
                model: cfg,
                step: 12,
                dataset_sha256: Some("ab".repeat(32)),
                clip: Some("baseline".into()),
            },
            params: init_params(&cfg).unwrap(),
        }
    }

    #[test]
    fn encode_decode_is_bit_exact() {
        let c = sample();
        let bytes = encode_checkpoint(&c).unwrap();
        assert_eq!(&bytes[..4], b"MCKP");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode_checkpoint(&magic).is_err());
    }
}
