//! Output scoring: exact match, Index+Answer match, hashed-embedding
//! similarity, BLEU, ROUGE and reasoning-chain components.
//!
//! All string metrics first apply [`normalize`]: trim, lowercase, collapse
//! runs of whitespace, strip one trailing period. [`NORMALIZATION_VERSION`]
//! is bumped whenever these rules change so stored golden values can be
//! invalidated.

mod chain;
mod embed;
mod ngram;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub use chain::{parse_reasoning_chain, score_chain, ChainPart, ComponentScore, ReasoningChain};
pub use embed::{embed_text, semantic_similarity, EMBED_DIM, EMBEDDER_NAME};
pub use ngram::{bleu, rouge, RougeScores};

pub const NORMALIZATION_VERSION: u32 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A metric value in `[0, 1]` (similarity in `[-1, 1]`) with its
/// breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalScore {
    pub metric: String,
    pub value: f64,
    pub details: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    pub normalization_version: u32,
}

impl EvalScore {
    pub(crate) fn new(metric: &str, value: f64) -> Self {
        Self {
            metric: metric.to_string(),
            value,
            details: BTreeMap::new(),
            flags: Vec::new(),
            normalization_version: NORMALIZATION_VERSION,
        }
    }

    pub(crate) fn with_detail(mut self, k: &str, v: f64) -> Self {
        self.details.insert(k.to_string(), v);
        self
    }

    pub(crate) fn flagged(mut self, flag: &str) -> Self {
        self.flags.push(flag.to_string());
        self
    }
}

pub fn normalize(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    match collapsed.strip_suffix('.') {
        Some(stripped) => stripped.trim_end().to_string(),
        None => collapsed,
    }
}

pub(crate) fn tokens(s: &str) -> Vec<String> {
    normalize(s).split_whitespace().map(str::to_string).collect()
}

/// 1 iff the normalized strings are equal.
pub fn exact_match(prediction: &str, reference: &str) -> f64 {
    if normalize(prediction) == normalize(reference) {
        1.0
    } else {
        0.0
    }
}

fn is_index_token(tok: &str, index: &str) -> bool {
    let t = tok.trim_end_matches([':', '.', ',']);
    t == index || t == format!("({index})") || t == format!("{index})")
}

/// 1 iff the prediction contains the option index as a standalone token
/// (`b`, `(b)` or `b)`, optionally followed by `:`/`.`/`,`) and, elsewhere,
/// the answer as a contiguous run of tokens. Both sides are normalized.
pub fn index_answer_match(prediction: &str, index: &str, answer: &str) -> Result<f64> {
    let index = normalize(index);
    if index.is_empty() || index.contains(char::is_whitespace) {
        return Err(LabError::Config(format!(
            "reference option index {index:?} must be a single non-empty token"
        )));
    }
    let pred = tokens(prediction);
    let ans = tokens(answer);
    if ans.is_empty() {
        return Err(LabError::Config("reference answer is empty".into()));
    }
    let k = ans.len();
    for (i, tok) in pred.iter().enumerate() {
        if !is_index_token(tok, &index) {
            continue;
        }
        for s in 0..pred.len().saturating_sub(k - 1) {
            if (s..s + k).contains(&i) {
                continue;
            }
            if pred[s..s + k] == ans[..] {
                return Ok(1.0);
            }
        }
    }
    Ok(0.0)
}

/// Metrics selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TextMetric {
    ExactMatch,
    IndexAnswer,
    Similarity,
    Bleu,
    Rouge1,
    Rouge2,
    RougeL,
}

impl TextMetric {
    pub fn name(self) -> &'static str {
        match self {
            TextMetric::ExactMatch => "em",
            TextMetric::IndexAnswer => "ia",
            TextMetric::Similarity => "ss",
            TextMetric::Bleu => "bleu",
            TextMetric::Rouge1 => "rouge1",
            TextMetric::Rouge2 => "rouge2",
            TextMetric::RougeL => "rougeL",
        }
    }

    /// Parse a comma list; `rouge` expands to ROUGE-1/2/L.
    pub fn parse_list(s: &str) -> Result<Vec<TextMetric>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part.eq_ignore_ascii_case("rouge") {
                out.extend([TextMetric::Rouge1, TextMetric::Rouge2, TextMetric::RougeL]);
            } else {
                out.push(part.parse()?);
            }
        }
        if out.is_empty() {
            return Err(LabError::Config("empty metric list".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for TextMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TextMetric {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "em" | "exact" | "exact_match" => TextMetric::ExactMatch,
            "ia" | "index_answer" => TextMetric::IndexAnswer,
            "ss" | "similarity" => TextMetric::Similarity,
            "bleu" => TextMetric::Bleu,
            "rouge1" | "rouge-1" => TextMetric::Rouge1,
            "rouge2" | "rouge-2" => TextMetric::Rouge2,
            "rougel" | "rouge-l" => TextMetric::RougeL,
            other => return Err(LabError::Config(format!("unknown metric {other:?}"))),
        })
    }
}

/// Reference output; `index` is required for Index+Answer scoring.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reference {
    pub text: String,
    #[serde(default)]
    pub index: Option<String>,
}

impl Reference {
    pub fn text(s: impl Into<String>) -> Self {
        Self {
            text: s.into(),
            index: None,
        }
    }

    /// Split a generated answer such as `(c) blue` into index `c` and
    /// answer `blue`. Without a leading option marker the index is `None`.
    pub fn from_output(s: &str) -> Self {
        let norm = normalize(s);
        let mut it = norm.splitn(2, ' ');
        let head = it.next().unwrap_or_default();
        let rest = it.next().unwrap_or_default();
        let inner = head.trim_end_matches([':', '.', ',']);
        let inner = inner.strip_prefix('(').unwrap_or(inner);
        match inner.strip_suffix(')') {
            Some(idx) if !idx.is_empty() && !idx.contains(['(', ')']) => Self {
                text: rest.to_string(),
                index: Some(idx.to_string()),
            },
            _ => Self::text(norm),
        }
    }
}

/// Score one prediction. Two outputs that are both empty after
/// normalization score 1 under every metric; exactly one empty side scores
/// 0 with an `empty_*` flag.
pub fn score_text(metric: TextMetric, prediction: &str, reference: &Reference) -> Result<EvalScore> {
    let name = metric.name();
    let p_empty = normalize(prediction).is_empty();
    let r_empty = normalize(&reference.text).is_empty();
    if metric != TextMetric::IndexAnswer {
        match (p_empty, r_empty) {
            (true, true) => return Ok(EvalScore::new(name, 1.0).flagged("both_empty")),
            (true, false) => return Ok(EvalScore::new(name, 0.0).flagged("empty_candidate")),
            (false, true) => return Ok(EvalScore::new(name, 0.0).flagged("empty_reference")),
            _ => {}
        }
    }
    Ok(match metric {
        TextMetric::ExactMatch => EvalScore::new(name, exact_match(prediction, &reference.text)),
        TextMetric::IndexAnswer => {
            let index = reference
                .index
                .as_deref()
                .ok_or_else(|| LabError::Config("Index+Answer needs a reference option index".into()))?;
            EvalScore::new(name, index_answer_match(prediction, index, &reference.text)?)
        }
        TextMetric::Similarity => EvalScore::new(name, semantic_similarity(prediction, &reference.text)?)
            .flagged(EMBEDDER_NAME),
        TextMetric::Bleu => bleu(prediction, &reference.text),
        TextMetric::Rouge1 => rouge(prediction, &reference.text).rouge1,
        TextMetric::Rouge2 => rouge(prediction, &reference.text).rouge2,
        TextMetric::RougeL => rouge(prediction, &reference.text).rouge_l,
    })
}
