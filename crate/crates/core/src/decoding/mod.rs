//! Autoregressive decoding (greedy, beam, top-k, nucleus, temperature) on
//! top of the KV-cached step, plus the cross-strategy variability sweep.
//!
//! Image-token ids are never emitted: their logits are masked before every
//! choice. Sampling strategies draw by inverse CDF over the (filtered)
//! distribution in vocabulary order, so the same seed gives the same draw
//! whenever two strategies keep the same support.

mod sweep;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distill::AdapterSet;
use crate::error::{LabError, Result};
use crate::model::{KvCache, Model, PromptState, RunOptions, TokenSequence, Vocab, EOS};
use crate::numerics::{log_softmax, softmax_in_place, Rng};

pub use sweep::{
    coefficient_of_variation, cv_csv, decode_sweep, generate_batch, mean_score, output_references, reference_outputs, sweep_csv, CvReport,
    SweepCell, SweepOptions, SweepTable,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam { width: usize },
    TopK { k: usize, temperature: f64 },
    Nucleus { p: f64, temperature: f64 },
    Temperature { temperature: f64 },
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        let temp_ok = |t: f64| t.is_finite() && t > 0.0;
        match *self {
            Strategy::Greedy => Ok(()),
            Strategy::Beam { width: 0 } => bad("beam width must be at least 1".into()),
            Strategy::TopK { k: 0, .. } => bad("top-k needs k >= 1".into()),
            Strategy::Nucleus { p, .. } if !(p > 0.0 && p <= 1.0) => bad(format!("nucleus p {p} outside (0, 1]")),
            Strategy::TopK { temperature: t, .. }
            | Strategy::Nucleus { temperature: t, .. }
            | Strategy::Temperature { temperature: t }
                if !temp_ok(t) =>
            {
                bad(format!("temperature {t} must be positive and finite"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_sampling(&self) -> bool {
        !matches!(self, Strategy::Greedy | Strategy::Beam { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Beam { .. } => "beam",
            Strategy::TopK { .. } => "topk",
            Strategy::Nucleus { .. } => "nucleus",
            Strategy::Temperature { .. } => "temp",
        }
    }

    /// Parameters as `key=value` pairs separated by `;`.
    pub fn params(&self) -> String {
        match *self {
            Strategy::Greedy => String::new(),
            Strategy::Beam { width } => format!("width={width}"),
            Strategy::TopK { k, temperature } => format!("k={k};t={temperature}"),
            Strategy::Nucleus { p, temperature } => format!("p={p};t={temperature}"),
            Strategy::Temperature { temperature } => format!("t={temperature}"),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Strategy::Greedy => write!(f, "greedy"),
            Strategy::Beam { width } => write!(f, "beam:{width}"),
            Strategy::TopK { k, temperature: 1.0 } => write!(f, "topk:{k}"),
            Strategy::TopK { k, temperature } => write!(f, "topk:{k}:{temperature}"),
            Strategy::Nucleus { p, temperature: 1.0 } => write!(f, "nucleus:{p}"),
            Strategy::Nucleus { p, temperature } => write!(f, "nucleus:{p}:{temperature}"),
            Strategy::Temperature { temperature } => write!(f, "temp:{temperature}"),
        }
    }
}

/// Parses `greedy`, `beam:W`, `topk:K[:T]`, `nucleus:P[:T]`, `temp:T`.
impl FromStr for Strategy {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize, default: Option<f64>| -> Result<f64> {
            match (parts.get(i), default) {
                (Some(v), _) => v
                    .parse::<f64>()
                    .map_err(|_| LabError::Config(format!("bad number {v:?} in strategy {s:?}"))),
                (None, Some(d)) => Ok(d),
                (None, None) => Err(LabError::Config(format!("strategy {s:?} is missing a parameter"))),
            }
        };
        let int = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .ok_or_else(|| LabError::Config(format!("strategy {s:?} is missing a parameter")))?
                .parse::<usize>()
                .map_err(|_| LabError::Config(format!("bad integer in strategy {s:?}")))
        };
        let max_parts = match parts[0] {
            "greedy" => 1,
            "beam" | "temp" | "temperature" => 2,
            _ => 3,
        };
        if parts.len() > max_parts {
            return Err(LabError::Config(format!("too many parameters in strategy {s:?}")));
        }
        let st = match parts[0].to_ascii_lowercase().as_str() {
            "greedy" => Strategy::Greedy,
            "beam" => Strategy::Beam { width: int(1)? },
            "topk" | "top-k" => Strategy::TopK {
                k: int(1)?,
                temperature: num(2, Some(1.0))?,
            },
            "nucleus" | "top-p" => Strategy::Nucleus {
                p: num(1, None)?,
                temperature: num(2, Some(1.0))?,
            },
            "temp" | "temperature" => Strategy::Temperature {
                temperature: num(1, None)?,
            },
            other => return Err(LabError::Config(format!("unknown decoding strategy {other:?}"))),
        };
        st.validate()?;
        Ok(st)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub max_new_tokens: usize,
    /// Seed of the sampling stream; ignored by greedy and beam.
    pub seed: u64,
}

impl DecodeConfig {
    pub fn new(strategy: Strategy, max_new_tokens: usize, seed: u64) -> Self {
        Self {
            strategy,
            max_new_tokens,
            seed,
        }
    }

    pub fn greedy(max_new_tokens: usize) -> Self {
        Self::new(Strategy::Greedy, max_new_tokens, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(LabError::Config("max_new_tokens must be at least 1".into()));
        }
        self.strategy.validate()
    }
}

/// Output of one decode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Generated ids, without the terminating EOS.
    pub tokens: Vec<usize>,
    pub text: String,
    pub stopped_at_eos: bool,
    /// Cached forward steps executed for this hypothesis.
    pub steps: usize,
    /// Sum of log-probabilities of the emitted tokens (including EOS).
    pub log_prob: f64,
}

fn mask_image(logits: &[f64], vocab: &Vocab) -> Vec<f64> {
    logits
        .iter()
        .enumerate()
        .map(|(i, &l)| if vocab.is_image(i) { f64::NEG_INFINITY } else { l })
        .collect()
}

/// Log-probabilities over emittable tokens (image ids get `-inf`).
pub fn next_token_log_probs(logits: &[f64], vocab: &Vocab) -> Vec<f64> {
    log_softmax(&mask_image(logits, vocab))
}

/// Index of the maximum, lowest index on ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices sorted by descending value, ties by ascending index.
fn ranked(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

/// Choose the next token under a sampling strategy. Greedy and beam both
/// reduce to the argmax here.
pub fn sample_token(logits: &[f64], vocab: &Vocab, strategy: &Strategy, rng: &mut Rng) -> usize {
    let masked = mask_image(logits, vocab);
    let temperature = match *strategy {
        Strategy::Greedy | Strategy::Beam { .. } => return argmax(&log_softmax(&masked)),
        Strategy::TopK { temperature, .. }
        | Strategy::Nucleus { temperature, .. }
        | Strategy::Temperature { temperature } => temperature,
    };
    let mut probs: Vec<f64> = masked.iter().map(|l| l / temperature).collect();
    softmax_in_place(&mut probs);
    match *strategy {
        Strategy::TopK { k, .. } => {
            for &i in ranked(&masked).iter().skip(k) {
                probs[i] = 0.0;
            }
        }
        Strategy::Nucleus { p, .. } if p < 1.0 => {
            let order = ranked(&probs);
            let mut cum = 0.0;
            let mut keep = order.len();
            for (n, &i) in order.iter().enumerate() {
                cum += probs[i];
                if cum >= p {
                    keep = n + 1;
                    break;
                }
            }
            for &i in &order[keep..] {
                probs[i] = 0.0;
            }
        }
        _ => {}
    }
    let mass: f64 = probs.iter().sum();
    let u = rng.next_f64() * mass;
    let mut acc = 0.0;
    let mut last = argmax(&probs);
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn room(cache: &KvCache, max_seq: usize) -> bool {
    cache.len() < max_seq
}

fn finish(vocab: &Vocab, tokens: Vec<usize>, stopped_at_eos: bool, steps: usize, log_prob: f64) -> Generation {
    Generation {
        text: vocab.decode(&tokens),
        tokens,
        stopped_at_eos,
        steps,
        log_prob,
    }
}

/// Decode from a prefilled prompt. Generation stops at EOS, after
/// `max_new_tokens` tokens, or when the context is full.
pub fn decode(model: &Model, prompt: &PromptState, cfg: &DecodeConfig, adapters: Option<&AdapterSet>) -> Result<Generation> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::Beam { width } => beam(model, prompt, width, cfg.max_new_tokens, adapters),
        _ => sample_loop(model, prompt, cfg, adapters),
    }
}

fn sample_loop(model: &Model, prompt: &PromptState, cfg: &DecodeConfig, adapters: Option<&AdapterSet>) -> Result<Generation> {
    let vocab = model.vocab();
    let max_seq = model.config().max_seq;
    let mut rng = Rng::new(cfg.seed);
    let mut cache = prompt.cache.clone();
    let mut logits = prompt.logits.clone();
    let mut tokens = Vec::new();
    let (mut steps, mut log_prob) = (0, 0.0);
    loop {
        let tok = sample_token(&logits, vocab, &cfg.strategy, &mut rng);
        log_prob += next_token_log_probs(&logits, vocab)[tok];
        if tok == EOS {
            return Ok(finish(vocab, tokens, true, steps, log_prob));
        }
        tokens.push(tok);
        if tokens.len() == cfg.max_new_tokens || !room(&cache, max_seq) {
            return Ok(finish(vocab, tokens, false, steps, log_prob));
        }
        logits = model.forward_step_with(tok, &mut cache, adapters)?.0;
        steps += 1;
    }
}

struct Hyp {
    tokens: Vec<usize>,
    log_prob: f64,
    done: bool,
    eos: bool,
    steps: usize,
    cache: KvCache,
    logits: Vec<f64>,
}

impl Hyp {
    /// Length-normalised score: mean log-probability per emitted token.
    fn score(&self) -> f64 {
        let n = self.tokens.len() + usize::from(self.eos);
        if n == 0 {
            0.0
        } else {
            self.log_prob / n as f64
        }
    }
}

fn beam(model: &Model, prompt: &PromptState, width: usize, max_new: usize, adapters: Option<&AdapterSet>) -> Result<Generation> {
    let vocab = model.vocab();
    let max_seq = model.config().max_seq;
    let mut beams = vec![Hyp {
        tokens: Vec::new(),
        log_prob: 0.0,
        done: false,
        eos: false,
        steps: 0,
        cache: prompt.cache.clone(),
        logits: prompt.logits.clone(),
    }];
    while beams.iter().any(|h| !h.done) {
        // (score, parent, token) ; token None = carry a finished hypothesis
        let mut cands: Vec<(f64, usize, Option<usize>, f64)> = Vec::new();
        for (bi, h) in beams.iter().enumerate() {
            if h.done {
                cands.push((h.score(), bi, None, h.log_prob));
                continue;
            }
            let lp = next_token_log_probs(&h.logits, vocab);
            for &tok in ranked(&lp).iter().take(width) {
                if lp[tok] == f64::NEG_INFINITY {
                    break;
                }
                let total = h.log_prob + lp[tok];
                let n = h.tokens.len() + 1;
                cands.push((total / n as f64, bi, Some(tok), total));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(width);
        let mut next = Vec::with_capacity(cands.len());
        for (_, bi, tok, total) in cands {
            let parent = &beams[bi];
            let Some(tok) = tok else {
                next.push(Hyp {
                    tokens: parent.tokens.clone(),
                    log_prob: parent.log_prob,
                    done: true,
                    eos: parent.eos,
                    steps: parent.steps,
                    cache: parent.cache.clone(),
                    logits: Vec::new(),
                });
                continue;
            };
            let mut tokens = parent.tokens.clone();
            if tok == EOS {
                next.push(Hyp {
                    tokens,
                    log_prob: total,
                    done: true,
                    eos: true,
                    steps: parent.steps,
                    cache: parent.cache.clone(),
                    logits: Vec::new(),
                });
                continue;
            }
            tokens.push(tok);
            let mut cache = parent.cache.clone();
            let done = tokens.len() == max_new || !room(&cache, max_seq);
            let (logits, steps) = if done {
                (Vec::new(), parent.steps)
            } else {
                (model.forward_step_with(tok, &mut cache, adapters)?.0, parent.steps + 1)
            };
            next.push(Hyp {
                tokens,
                log_prob: total,
                done,
                eos: false,
                steps,
                cache,
                logits,
            });
        }
        beams = next;
    }
    let best = beams
        .into_iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.score().total_cmp(&b.score()).then(ib.cmp(ia)))
        .map(|(_, h)| h)
        .expect("beam is never empty");
    Ok(finish(vocab, best.tokens, best.eos, best.steps, best.log_prob))
}

/// Prefill `seq` (optionally truncated at `cut`) and decode.
pub fn generate(
    model: &Model,
    seq: &TokenSequence,
    cut: Option<usize>,
    cfg: &DecodeConfig,
    adapters: Option<&AdapterSet>,
) -> Result<Generation> {
    let (prompt, _) = model.prefill(seq, RunOptions { cut, adapters })?;
    decode(model, &prompt, cfg, adapters)
}
