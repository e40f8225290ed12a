//! `ADPT` adapter checkpoints.
//!
//! Layout, all little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `ADPT` |
//! | 4     | version (`u32`, currently 1) |
//! | 8     | truncation depth `K` (`u64`) |
//! | 8     | rank (`u64`) |
//! | 8     | layers (`u64`) |
//! | 8     | `d_model` (`u64`) |
//! | 8     | `α` (`f64`) |
//! | 8·n   | factors as `f64`, per block `A_q, B_q, A_v, B_v`, `n = layers·4·rank·d_model` |

use std::path::Path;

use super::AdapterSet;
use crate::error::{LabError, Result};

pub const ADAPTER_MAGIC: &[u8; 4] = b"ADPT";
pub const ADAPTER_VERSION: u32 = 1;
const HEADER: usize = 48;

pub fn encode(a: &AdapterSet) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER + 8 * a.len());
    buf.extend_from_slice(ADAPTER_MAGIC);
    buf.extend_from_slice(&ADAPTER_VERSION.to_le_bytes());
    for v in [a.cut(), a.rank(), a.layers(), a.d_model()] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    buf.extend_from_slice(&a.alpha().to_le_bytes());
    for p in a.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    buf
}

pub fn decode(bytes: &[u8]) -> Result<AdapterSet> {
    if bytes.len() < 8 || &bytes[..4] != ADAPTER_MAGIC {
        return Err(LabError::Format("missing ADPT magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != ADAPTER_VERSION {
        return Err(LabError::UnsupportedVersion {
            found: version,
            supported: vec![ADAPTER_VERSION],
        });
    }
    if bytes.len() < HEADER {
        return Err(LabError::Truncated("adapter header is incomplete".into()));
    }
    let word = |i: usize| bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes");
    let field = |i: usize| -> Result<usize> {
        let v = u64::from_le_bytes(word(i));
        usize::try_from(v)
            .ok()
            .filter(|&x| x <= 1 << 20)
            .ok_or_else(|| LabError::Format(format!("adapter header field {v} out of range")))
    };
    let (cut, rank, layers, d) = (field(0)?, field(1)?, field(2)?, field(3)?);
    let alpha = f64::from_le_bytes(word(4));
    if rank == 0 || rank > d || cut > layers || !alpha.is_finite() {
        return Err(LabError::Format("inconsistent adapter header".into()));
    }
    let n = layers * 4 * rank * d;
    let body = &bytes[HEADER..];
    if body.len() != 8 * n {
        return Err(LabError::Truncated(format!(
            "expected {} factor bytes, found {}",
            8 * n,
            body.len()
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(LabError::Data("non-finite adapter factor".into()));
    }
    AdapterSet::from_parts(rank, alpha, cut, layers, d, data)
}

pub fn write_adapters(a: &AdapterSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(a)).map_err(|e| LabError::io(path, e))
}

pub fn read_adapters(path: impl AsRef<Path>) -> Result<AdapterSet> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| LabError::io(path, e))?)
}
