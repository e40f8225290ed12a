//! Analytic operation counts for prefill and cached decoding under
//! visual-depth truncation.
//!
//! A multiply-accumulate counts as 2 flops. For one decoder block processing
//! `q` query rows against `k` keys (`d` = model width, `m` = MLP width,
//! `h` = heads):
//!
//! | term        | flops                 |
//! |-------------|-----------------------|
//! | projections | `8·q·d²` (Q, K, V, O) |
//! | attention   | `4·q·k·d` (scores + mix) |
//! | mlp         | `4·q·d·m`             |
//! | layer_norm  | `2 × 7·q·d`           |
//! | softmax     | `h·q·k·(5 + 1)` (softmax + score scaling) |
//! | bias        | `5·q·d + q·m`         |
//! | gelu        | `8·q·m`               |
//! | residual    | `2·q·d`               |
//! | adapters    | `8·r·q·d + 4·q·d` when rank-`r` adapters are active |
//!
//! Embedding lookups and the LM head are not counted. Counts are exact
//! integers; GFLOPs appear only in reports.

use std::fmt::Write as _;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::ModelConfig;

const LN: u64 = 7;
const SOFTMAX: u64 = 5;
const GELU: u64 = 8;

/// Per-kernel flop counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelTerms {
    pub projections: u64,
    pub attention: u64,
    pub mlp: u64,
    pub layer_norm: u64,
    pub softmax: u64,
    pub bias: u64,
    pub gelu: u64,
    pub residual: u64,
    pub adapters: u64,
}

impl KernelTerms {
    pub fn total(&self) -> u64 {
        self.projections
            + self.attention
            + self.mlp
            + self.layer_norm
            + self.softmax
            + self.bias
            + self.gelu
            + self.residual
            + self.adapters
    }
}

impl Add for KernelTerms {
    type Output = KernelTerms;

    fn add(self, o: KernelTerms) -> KernelTerms {
        KernelTerms {
            projections: self.projections + o.projections,
            attention: self.attention + o.attention,
            mlp: self.mlp + o.mlp,
            layer_norm: self.layer_norm + o.layer_norm,
            softmax: self.softmax + o.softmax,
            bias: self.bias + o.bias,
            gelu: self.gelu + o.gelu,
            residual: self.residual + o.residual,
            adapters: self.adapters + o.adapters,
        }
    }
}

impl std::iter::Sum for KernelTerms {
    fn sum<I: Iterator<Item = KernelTerms>>(iter: I) -> Self {
        iter.fold(KernelTerms::default(), Add::add)
    }
}

/// Cost of one block for `q` queries attending over `k` keys.
pub fn block_terms(cfg: &ModelConfig, q: usize, k: usize, adapter_rank: Option<usize>) -> KernelTerms {
    let (q, k) = (q as u64, k as u64);
    let (d, m, h) = (cfg.d_model as u64, cfg.d_mlp as u64, cfg.heads as u64);
    KernelTerms {
        projections: 8 * q * d * d,
        attention: 4 * q * k * d,
        mlp: 4 * q * d * m,
        layer_norm: 2 * LN * q * d,
        softmax: h * q * k * (SOFTMAX + 1),
        bias: 5 * q * d + q * m,
        gelu: GELU * q * m,
        residual: 2 * q * d,
        adapters: adapter_rank.map_or(0, |r| 8 * r as u64 * q * d + 4 * q * d),
    }
}

pub fn block_flops(cfg: &ModelConfig, q: usize, k: usize, adapter_rank: Option<usize>) -> u64 {
    block_terms(cfg, q, k, adapter_rank).total()
}

/// Prefill cost of one block over a prompt of `n` tokens.
pub fn layer_flops(n: usize, cfg: &ModelConfig) -> Result<u64> {
    if n == 0 {
        return Err(LabError::Argument("sequence length must be at least 1".into()));
    }
    Ok(block_flops(cfg, n, n, None))
}

/// Prompt rows seen by each block: `n_full` up to and including block
/// `cut`, `n_txt` afterwards.
pub fn block_prompt_lens(cfg: &ModelConfig, n_full: usize, n_txt: usize, cut: usize) -> Result<Vec<usize>> {
    if n_txt > n_full {
        return Err(LabError::Argument(format!(
            "text tokens {n_txt} exceed prompt length {n_full}"
        )));
    }
    if cut > cfg.layers {
        return Err(LabError::Argument(format!(
            "cut layer {cut} exceeds {} layers",
            cfg.layers
        )));
    }
    if n_full == 0 || (n_txt == 0 && cut < cfg.layers) {
        return Err(LabError::Argument(
            "every block needs at least one prompt token".into(),
        ));
    }
    Ok((1..=cfg.layers)
        .map(|b| if b <= cut { n_full } else { n_txt })
        .collect())
}

pub fn prefill_flops(cfg: &ModelConfig, n_full: usize, n_txt: usize, cut: usize) -> Result<u64> {
    block_prompt_lens(cfg, n_full, n_txt, cut)?
        .into_iter()
        .map(|n| layer_flops(n, cfg))
        .sum()
}

/// Cost of `steps` cached decode steps. Step `t` (from 0) at a block whose
/// prompt contributed `n` cache entries attends over `n + t + 1` keys.
/// Generating `G` tokens takes `G − 1` steps; the first token comes from
/// the prefill logits.
pub fn decode_flops(cfg: &ModelConfig, prompt_lens: &[usize], steps: usize) -> u64 {
    decode_terms(cfg, prompt_lens, steps, None).total()
}

fn decode_terms(cfg: &ModelConfig, prompt_lens: &[usize], steps: usize, rank: Option<usize>) -> KernelTerms {
    prompt_lens
        .iter()
        .flat_map(|&n| (0..steps).map(move |t| (n, t)))
        .map(|(n, t)| block_terms(cfg, 1, n + t + 1, rank))
        .sum()
}

/// Cost of one block in a report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub block: usize,
    pub prompt_tokens: usize,
    pub prefill: u64,
    pub decode: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    /// Retained visual depth (cut layer).
    pub cut: usize,
    pub n_full: usize,
    pub n_txt: usize,
    pub decode_steps: usize,
    pub adapter_rank: Option<usize>,
    pub prefill: u64,
    pub decode: u64,
    pub total: u64,
    pub per_layer: Vec<LayerCost>,
    pub breakdown: KernelTerms,
}

impl FlopsReport {
    pub fn gflops_prefill(&self) -> f64 {
        self.prefill as f64 / 1e9
    }

    pub fn gflops_decode(&self) -> f64 {
        self.decode as f64 / 1e9
    }

    pub fn gflops_total(&self) -> f64 {
        self.gflops_prefill() + self.gflops_decode()
    }
}

pub fn flops_report(
    cfg: &ModelConfig,
    n_full: usize,
    n_txt: usize,
    cut: usize,
    decode_steps: usize,
    adapter_rank: Option<usize>,
) -> Result<FlopsReport> {
    let lens = block_prompt_lens(cfg, n_full, n_txt, cut)?;
    let mut per_layer = Vec::with_capacity(lens.len());
    let mut breakdown = KernelTerms::default();
    for (i, &n) in lens.iter().enumerate() {
        let pre = block_terms(cfg, n, n, adapter_rank);
        let dec = decode_terms(cfg, &[n], decode_steps, adapter_rank);
        breakdown = breakdown + pre + dec;
        per_layer.push(LayerCost {
            block: i + 1,
            prompt_tokens: n,
            prefill: pre.total(),
            decode: dec.total(),
        });
    }
    let prefill: u64 = per_layer.iter().map(|l| l.prefill).sum();
    let decode: u64 = per_layer.iter().map(|l| l.decode).sum();
    Ok(FlopsReport {
        cut,
        n_full,
        n_txt,
        decode_steps,
        adapter_rank,
        prefill,
        decode,
        total: prefill + decode,
        per_layer,
        breakdown,
    })
}

/// Reports for every cut `0..=L`.
pub fn depth_costs(cfg: &ModelConfig, n_full: usize, n_txt: usize, decode_steps: usize) -> Result<Vec<FlopsReport>> {
    (0..=cfg.layers)
        .map(|cut| flops_report(cfg, n_full, n_txt, cut, decode_steps, None))
        .collect()
}

/// Score at one retained depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthScore {
    pub cut: usize,
    pub base: f64,
    pub finetuned: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub cut: usize,
    pub gflops_prefill: f64,
    pub gflops_decode: f64,
    pub gflops_total: f64,
    pub base_score: f64,
    pub finetuned_score: Option<f64>,
}

/// Join scores and costs on the cut layer. Both inputs must cover the same
/// set of cuts.
pub fn frontier_report(scores: &[DepthScore], costs: &[FlopsReport]) -> Result<Vec<FrontierRow>> {
    let mut a: Vec<usize> = scores.iter().map(|s| s.cut).collect();
    let mut b: Vec<usize> = costs.iter().map(|c| c.cut).collect();
    a.sort_unstable();
    b.sort_unstable();
    let dup = a.windows(2).any(|w| w[0] == w[1]) || b.windows(2).any(|w| w[0] == w[1]);
    if a != b || dup {
        return Err(LabError::Argument(format!(
            "score cuts {a:?} and cost cuts {b:?} are misaligned"
        )));
    }
    let mut rows: Vec<FrontierRow> = scores
        .iter()
        .map(|s| {
            let c = costs.iter().find(|c| c.cut == s.cut).expect("aligned above");
            FrontierRow {
                cut: s.cut,
                gflops_prefill: c.gflops_prefill(),
                gflops_decode: c.gflops_decode(),
                gflops_total: c.gflops_total(),
                base_score: s.base,
                finetuned_score: s.finetuned,
            }
        })
        .collect();
    rows.sort_by_key(|r| r.cut);
    Ok(rows)
}

pub const COSTS_CSV_HEADER: &str = "K,n_full,n_txt,decode_steps,prefill,decode,total";

/// Exact integer counts, one row per report.
pub fn costs_csv(reports: &[FlopsReport]) -> String {
    let mut out = String::from(COSTS_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.cut, r.n_full, r.n_txt, r.decode_steps, r.prefill, r.decode, r.total
        );
    }
    out
}

pub const FRONTIER_CSV_HEADER: &str = "K,gflops_prefill,gflops_decode,gflops_total,base_score,finetuned_score";

pub fn frontier_csv(rows: &[FrontierRow]) -> String {
    let mut out = String::from(FRONTIER_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let ft = r.finetuned_score.map_or_else(|| "NaN".into(), |v| v.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.cut, r.gflops_prefill, r.gflops_decode, r.gflops_total, r.base_score, ft
        );
    }
    out
}
