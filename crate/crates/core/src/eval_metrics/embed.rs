use crate::error::{LabError, Result};

use super::{fnv1a, tokens};

pub const EMBED_DIM: usize = 256;
/// Name recorded next to similarity scores in reports.
pub const EMBEDDER_NAME: &str = "hashed-bow-3gram-256";

fn features(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in tokens(text) {
        out.push(format!("w:{word}"));
        let padded: Vec<char> = format!("#{word}#").chars().collect();
        for win in padded.windows(3) {
            out.push(format!("c:{}", win.iter().collect::<String>()));
        }
    }
    out
}

fn counts(text: &str) -> Result<[u64; EMBED_DIM]> {
    let feats = features(text);
    if feats.is_empty() {
        return Err(LabError::EmptyInput("text is empty after normalization".into()));
    }
    let mut c = [0u64; EMBED_DIM];
    for f in feats {
        c[(fnv1a(f.as_bytes()) % EMBED_DIM as u64) as usize] += 1;
    }
    Ok(c)
}

/// Unit-norm hashed bag of word unigrams and character 3-grams
/// (words padded with `#`).
pub fn embed_text(text: &str) -> Result<Vec<f64>> {
    let c = counts(text)?;
    let norm = (c.iter().map(|&x| x * x).sum::<u64>() as f64).sqrt();
    Ok(c.iter().map(|&x| x as f64 / norm).collect())
}

/// Cosine of the two embeddings, computed from the integer bin counts so
/// that identical texts give exactly 1.
pub fn semantic_similarity(a: &str, b: &str) -> Result<f64> {
    let ca = counts(a)?;
    let cb = counts(b)?;
    let dot: u64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    let na: u64 = ca.iter().map(|x| x * x).sum();
    let nb: u64 = cb.iter().map(|x| x * x).sum();
    let denom = if na == nb { na as f64 } else { (na as f64 * nb as f64).sqrt() };
    Ok((dot as f64 / denom).min(1.0))
}
