//! `TVLM` checkpoint files.
//!
//! Layout, all little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `TVLM` |
//! | 4     | version (`u32`, currently 1) |
//! | 64    | config: `layers, d_model, heads, d_mlp, vocab, image_tokens, max_seq, seed` as `u64` |
//! | 8     | parameter count (`u64`) |
//! | 8·n   | parameters as `f64`, in [`ParamLayout`](super::ParamLayout) order |

use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{LabError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TVLM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let cfg = model.config();
    let mut buf = Vec::with_capacity(84 + 8 * model.params().len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        cfg.layers as u64,
        cfg.d_model as u64,
        cfg.heads as u64,
        cfg.d_mlp as u64,
        cfg.vocab as u64,
        cfg.image_tokens as u64,
        cfg.max_seq as u64,
        cfg.seed,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| LabError::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes)
}

fn u64_at(bytes: &[u8], at: usize) -> Result<u64> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .ok_or_else(|| LabError::Truncated(format!("checkpoint ends before byte {}", at + 8)))
}

fn as_usize(v: u64, what: &str) -> Result<usize> {
    usize::try_from(v)
        .ok()
        .filter(|&x| x <= 1 << 24)
        .ok_or_else(|| LabError::Format(format!("{what} value {v} out of range")))
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(LabError::Format("missing TVLM magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(LabError::UnsupportedVersion {
            found: version,
            supported: vec![CHECKPOINT_VERSION],
        });
    }
    let f = |i: usize, name: &str| u64_at(bytes, 8 + 8 * i).and_then(|v| as_usize(v, name));
    let cfg = ModelConfig {
        layers: f(0, "layers")?,
        d_model: f(1, "d_model")?,
        heads: f(2, "heads")?,
        d_mlp: f(3, "d_mlp")?,
        vocab: f(4, "vocab")?,
        image_tokens: f(5, "image_tokens")?,
        max_seq: f(6, "max_seq")?,
        seed: u64_at(bytes, 8 + 8 * 7)?,
    };
    cfg.validate()?;
    let count = as_usize(u64_at(bytes, 72)?, "parameter count")?;
    let expected = cfg.parameter_count();
    if count != expected {
        return Err(LabError::Format(format!(
            "parameter count {count} does not match configuration ({expected})"
        )));
    }
    let payload = &bytes[80..];
    if payload.len() != 8 * count {
        return Err(LabError::Truncated(format!(
            "expected {} payload bytes, found {}",
            8 * count,
            payload.len()
        )));
    }
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Model::build(cfg)?.with_params(params)
}
