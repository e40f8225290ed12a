//! `HSD1` hidden-state traces: one sequence per file, every captured layer
//! holding all `N` tokens.
//!
//! Layout, all little-endian:
//!
//! | bytes   | field |
//! |---------|-------|
//! | 4       | magic `HSD1` |
//! | 4       | version (`u32`, currently 1) |
//! | 4       | layer count `L + 1` (`u32`) |
//! | 4       | token count `N` (`u32`) |
//! | 4       | hidden size `d` (`u32`) |
//! | N       | modality mask, one byte per token: `0` text, `1` image |
//! | 4       | metadata length `m` (`u32`) |
//! | m       | UTF-8 JSON metadata |
//! | 4·(L+1)·N·d | `f32` values, layer by layer, each layer row-major `[N × d]` |
//!
//! External exporters should write layer 0 as the embedding output and layer
//! `l` as the output of block `l`, with rows in sequence order. When the
//! metadata object carries a `"tokens"` array of length `N`, the reader
//! restores the token ids from it; otherwise ids are zero.

use std::path::Path;

use serde_json::{json, Value};

use crate::error::{LabError, Result};
use crate::model::{LayerStates, Modality, TokenSequence};
use crate::numerics::Matrix;

pub const TRACE_MAGIC: &[u8; 4] = b"HSD1";
pub const TRACE_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[TRACE_VERSION];

/// A decoded trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub states: LayerStates,
    pub sequence: TokenSequence,
    pub metadata: Value,
}

/// Size in bytes of the header and metadata for `n` tokens.
pub fn header_len(n: usize, metadata_len: usize) -> usize {
    24 + n + metadata_len
}

/// Serialize the states of one untruncated pass. `metadata` must be a JSON
/// object; the token ids are added under `"tokens"`.
pub fn encode_trace(states: &LayerStates, seq: &TokenSequence, metadata: Option<&Value>) -> Result<Vec<u8>> {
    let n = seq.len();
    let d = states.dim();
    if states.is_empty() || n == 0 || d == 0 {
        return Err(LabError::Serialization("trace has no layers, tokens or features".into()));
    }
    if states.modality != seq.modality() {
        return Err(LabError::Serialization("states and sequence disagree on modality".into()));
    }
    let full: Vec<usize> = (0..n).collect();
    for (l, (h, p)) in states.hidden.iter().zip(&states.positions).enumerate() {
        if h.shape() != (n, d) || *p != full {
            return Err(LabError::Serialization(format!(
                "layer {l} does not hold all {n} tokens; traces store untruncated passes only"
            )));
        }
    }
    let mut meta = match metadata {
        None => json!({}),
        Some(Value::Object(m)) => Value::Object(m.clone()),
        Some(_) => return Err(LabError::Serialization("trace metadata must be a JSON object".into())),
    };
    meta["tokens"] = json!(seq.tokens());
    let meta = serde_json::to_vec(&meta).map_err(|e| LabError::Serialization(e.to_string()))?;
    let u32_of = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| LabError::Serialization(format!("{what} {v} exceeds u32")))
    };
    let mut buf = Vec::with_capacity(header_len(n, meta.len()) + 4 * states.len() * n * d);
    buf.extend_from_slice(TRACE_MAGIC);
    buf.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    for (v, what) in [(states.len(), "layer count"), (n, "token count"), (d, "hidden size")] {
        buf.extend_from_slice(&u32_of(v, what)?.to_le_bytes());
    }
    buf.extend(seq.modality().iter().map(|&m| u8::from(m == Modality::Image)));
    buf.extend_from_slice(&u32_of(meta.len(), "metadata length")?.to_le_bytes());
    buf.extend_from_slice(&meta);
    for (l, h) in states.hidden.iter().enumerate() {
        for &v in h.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(LabError::Serialization(format!(
                    "layer {l} holds {v}, which has no finite f32 representation"
                )));
            }
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            LabError::Truncated(format!(
                "{what} needs {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parse a trace. Total: any input yields a trace or a typed error.
pub fn decode_trace(bytes: &[u8]) -> Result<Trace> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4, "magic").ok() != Some(TRACE_MAGIC.as_slice()) {
        return Err(LabError::Format("missing HSD1 magic".into()));
    }
    let version = c.u32("version")?;
    if !SUPPORTED_VERSIONS.contains(&version) {
        return Err(LabError::UnsupportedVersion {
            found: version,
            supported: SUPPORTED_VERSIONS.to_vec(),
        });
    }
    let layers = c.u32("layer count")? as usize;
    let n = c.u32("token count")? as usize;
    let d = c.u32("hidden size")? as usize;
    if layers == 0 || n == 0 || d == 0 {
        return Err(LabError::Format("layer count, token count and hidden size must be positive".into()));
    }
    let modality = c
        .take(n, "modality mask")?
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(Modality::Text),
            1 => Ok(Modality::Image),
            other => Err(LabError::Format(format!("mask byte {other} at token {i}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let meta_len = c.u32("metadata length")? as usize;
    let meta_bytes = c.take(meta_len, "metadata")?;
    let metadata: Value = serde_json::from_slice(meta_bytes)
        .map_err(|e| LabError::Format(format!("metadata is not valid JSON: {e}")))?;
    let payload = layers
        .checked_mul(n)
        .and_then(|x| x.checked_mul(d))
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| LabError::Format("payload size overflows".into()))?;
    let rest = bytes.len() - c.at;
    if rest < payload {
        return Err(LabError::Truncated(format!("payload needs {payload} bytes, file has {rest}")));
    }
    if rest > payload {
        return Err(LabError::Format(format!("{} trailing bytes after payload", rest - payload)));
    }
    let mut hidden = Vec::with_capacity(layers);
    for (l, chunk) in c.take(payload, "payload")?.chunks_exact(4 * n * d).enumerate() {
        let data = chunk
            .chunks_exact(4)
            .map(|b| {
                let v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
                if v.is_finite() {
                    Ok(f64::from(v))
                } else {
                    Err(LabError::Data(format!("non-finite value {v} in layer {l}")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        hidden.push(Matrix::new(n, d, data)?);
    }
    let tokens = match metadata.get("tokens").and_then(Value::as_array) {
        Some(ids) if ids.len() == n => ids
            .iter()
            .map(|v| v.as_u64().map(|x| x as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| LabError::Format("metadata tokens must be unsigned integers".into()))?,
        Some(_) => return Err(LabError::Format("metadata tokens length differs from N".into())),
        None => vec![0; n],
    };
    let states = LayerStates {
        hidden,
        positions: vec![(0..n).collect(); layers],
        modality: modality.clone(),
    };
    Ok(Trace {
        states,
        sequence: TokenSequence::new(tokens, modality)?,
        metadata,
    })
}

pub fn write_trace(states: &LayerStates, seq: &TokenSequence, metadata: Option<&Value>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_trace(states, seq, metadata)?;
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Trace> {
    let path = path.as_ref();
    decode_trace(&std::fs::read(path).map_err(|e| LabError::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig, RunOptions};

    fn pass() -> (LayerStates, TokenSequence) {
        let m = Model::build(ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_mlp: 12,
            image_tokens: 3,
            max_seq: 16,
            ..ModelConfig::default()
        })
        .unwrap();
        let s = TokenSequence::multimodal(&[0.1, 0.5, 0.9], "hi", m.config()).unwrap();
        (m.run(&s, RunOptions::default()).unwrap().states, s)
    }

    #[test]
    fn round_trip_is_exact_at_f32() {
        let (states, seq) = pass();
        let bytes = encode_trace(&states, &seq, Some(&json!({"source": "toy"}))).unwrap();
        let meta_len = u32::from_le_bytes(bytes[20 + 5..24 + 5].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), header_len(5, meta_len) + 3 * 5 * 8 * 4);
        let t = decode_trace(&bytes).unwrap();
        assert_eq!(t.sequence, seq);
        assert_eq!(t.metadata["source"], "toy");
        for (a, b) in states.hidden.iter().zip(&t.states.hidden) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
            }
        }
        assert_eq!(encode_trace(&t.states, &t.sequence, Some(&json!({"source": "toy"}))).unwrap(), bytes);
    }

    #[test]
    fn typed_errors() {
        let (states, seq) = pass();
        let bytes = encode_trace(&states, &seq, None).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode_trace(&bad), Err(LabError::Format(_))));
        let mut v = bytes.clone();
        v[4..8].copy_from_slice(&999u32.to_le_bytes());
        match decode_trace(&v) {
            Err(LabError::UnsupportedVersion { found, supported }) => {
                assert_eq!((found, supported), (999, vec![1]));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_trace(&bytes[..bytes.len() - 3]), Err(LabError::Truncated(_))));
        let mut nan = bytes.clone();
        let k = nan.len() - 4;
        nan[k..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_trace(&nan), Err(LabError::Data(_))));
        let mut inf = states.clone();
        inf.hidden[1].set(0, 0, 1e300);
        assert!(matches!(encode_trace(&inf, &seq, None), Err(LabError::Serialization(_))));
    }
}
