use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{generate, DecodeConfig, Generation, Strategy};
use crate::distill::AdapterSet;
use crate::error::{LabError, Result};
use crate::eval_metrics::{score_text, Reference, TextMetric};
use crate::model::{Model, TokenSequence};
use crate::numerics::derive_seed;
use crate::par::{try_map_indexed, Parallelism};

/// Mean, population standard deviation and CV of scores across strategies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// `None` when the mean is not positive.
    pub cv: Option<f64>,
    pub undefined: bool,
}

pub fn coefficient_of_variation(scores: &[f64]) -> Result<CvReport> {
    if scores.len() < 2 {
        return Err(LabError::SampleSize(format!(
            "coefficient of variation needs at least 2 strategies, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(LabError::Argument("scores must be finite".into()));
    }
    let n = scores.len() as f64;
    let (mean, std) = if scores.iter().all(|&s| s == scores[0]) {
        (scores[0], 0.0)
    } else {
        let mean = scores.iter().sum::<f64>() / n;
        (mean, (scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n).sqrt())
    };
    let cv = (mean > 0.0).then(|| std / mean);
    Ok(CvReport {
        scores: scores.to_vec(),
        mean,
        std,
        cv,
        undefined: cv.is_none(),
    })
}

/// Decode every prompt. Sampling strategies use the child seed
/// `derive_seed(cfg.seed, i)` for prompt `i`.
pub fn generate_batch(
    model: &Model,
    prompts: &[TokenSequence],
    cut: Option<usize>,
    cfg: &DecodeConfig,
    adapters: Option<&AdapterSet>,
    mode: Parallelism,
) -> Result<Vec<Generation>> {
    cfg.validate()?;
    try_map_indexed(mode, prompts.len(), |i| {
        let c = DecodeConfig {
            seed: derive_seed(cfg.seed, i as u64),
            ..*cfg
        };
        generate(model, &prompts[i], cut, &c, adapters)
    })
}

/// Full-depth greedy outputs of the base model, the references every sweep
/// is scored against.
pub fn reference_outputs(model: &Model, prompts: &[TokenSequence], max_new_tokens: usize, mode: Parallelism) -> Result<Vec<String>> {
    Ok(generate_batch(model, prompts, None, &DecodeConfig::greedy(max_new_tokens), None, mode)?
        .into_iter()
        .map(|g| g.text)
        .collect())
}

/// Wrap base-model outputs as references. For Index+Answer the leading
/// option marker of each output becomes the reference index.
pub fn output_references(outputs: &[String], metric: TextMetric) -> Vec<Reference> {
    outputs
        .iter()
        .map(|o| match metric {
            TextMetric::IndexAnswer => Reference::from_output(o),
            _ => Reference::text(o.clone()),
        })
        .collect()
}

/// Score `outputs` against `references` and return the mean plus the
/// per-prompt values.
pub fn mean_score(metric: TextMetric, outputs: &[String], references: &[Reference]) -> Result<(f64, Vec<f64>)> {
    if outputs.is_empty() || outputs.len() != references.len() {
        return Err(LabError::Argument(format!(
            "{} outputs for {} references",
            outputs.len(),
            references.len()
        )));
    }
    let per = outputs
        .iter()
        .zip(references)
        .map(|(o, r)| score_text(metric, o, r).map(|s| s.value))
        .collect::<Result<Vec<f64>>>()?;
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

#[derive(Clone, Debug)]
pub struct SweepOptions<'a> {
    pub metric: TextMetric,
    pub mode: Parallelism,
    /// Adapters per cut; cuts without an entry run the plain truncated model.
    pub adapters: Option<&'a BTreeMap<usize, AdapterSet>>,
}

impl Default for SweepOptions<'_> {
    fn default() -> Self {
        Self {
            metric: TextMetric::Similarity,
            mode: Parallelism::default(),
            adapters: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub cut: usize,
    pub strategy: Strategy,
    pub score: f64,
    pub per_prompt: Vec<f64>,
}

/// Scores for every (cut, strategy) pair, cut-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub metric: TextMetric,
    pub cuts: Vec<usize>,
    pub strategies: Vec<DecodeConfig>,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn cell(&self, cut_idx: usize, strategy_idx: usize) -> &SweepCell {
        &self.cells[cut_idx * self.strategies.len() + strategy_idx]
    }

    pub fn row(&self, cut_idx: usize) -> &[SweepCell] {
        let w = self.strategies.len();
        &self.cells[cut_idx * w..(cut_idx + 1) * w]
    }

    /// CV across strategies at every cut.
    pub fn cv(&self) -> Result<Vec<(usize, CvReport)>> {
        (0..self.cuts.len())
            .map(|i| {
                let scores: Vec<f64> = self.row(i).iter().map(|c| c.score).collect();
                coefficient_of_variation(&scores).map(|r| (self.cuts[i], r))
            })
            .collect()
    }
}

/// Decode every prompt at every cut with every strategy and score the
/// outputs against `references`.
pub fn decode_sweep(
    model: &Model,
    prompts: &[TokenSequence],
    references: &[Reference],
    cuts: &[usize],
    strategies: &[DecodeConfig],
    opts: &SweepOptions<'_>,
) -> Result<SweepTable> {
    if prompts.is_empty() || strategies.is_empty() || cuts.is_empty() {
        return Err(LabError::Argument("sweep needs prompts, cuts and strategies".into()));
    }
    if references.len() != prompts.len() {
        return Err(LabError::Argument("one reference per prompt is required".into()));
    }
    for s in strategies {
        s.validate()?;
    }
    if let Some(&bad) = cuts.iter().find(|&&c| c > model.layers()) {
        return Err(LabError::Argument(format!("cut {bad} exceeds {} layers", model.layers())));
    }
    let (nc, ns, np) = (cuts.len(), strategies.len(), prompts.len());
    let texts = try_map_indexed(opts.mode, nc * ns * np, |job| {
        let (ci, rest) = (job / (ns * np), job % (ns * np));
        let (si, pi) = (rest / np, rest % np);
        let cut = cuts[ci];
        let cfg = DecodeConfig {
            seed: derive_seed(strategies[si].seed, pi as u64),
            ..strategies[si]
        };
        let adapters = opts.adapters.and_then(|m| m.get(&cut));
        generate(model, &prompts[pi], Some(cut), &cfg, adapters).map(|g| g.text)
    })?;
    let mut cells = Vec::with_capacity(nc * ns);
    for (ci, &cut) in cuts.iter().enumerate() {
        for (si, s) in strategies.iter().enumerate() {
            let at = (ci * ns + si) * np;
            let (score, per_prompt) = mean_score(opts.metric, &texts[at..at + np], references)?;
            cells.push(SweepCell {
                cut,
                strategy: s.strategy,
                score,
                per_prompt,
            });
        }
    }
    Ok(SweepTable {
        metric: opts.metric,
        cuts: cuts.to_vec(),
        strategies: strategies.to_vec(),
        cells,
    })
}

pub const SWEEP_CSV_HEADER: &str = "K,strategy,params,score";
pub const CV_CSV_HEADER: &str = "K,mu,sigma,cv,undefined";

pub fn sweep_csv(table: &SweepTable) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for c in &table.cells {
        let _ = writeln!(out, "{},{},{},{}", c.cut, c.strategy.name(), c.strategy.params(), c.score);
    }
    out
}

/// Undefined CVs leave the `cv` field empty and set `undefined` to 1.
pub fn cv_csv(rows: &[(usize, CvReport)]) -> String {
    let mut out = format!("{CV_CSV_HEADER}\n");
    for (cut, r) in rows {
        let cv = r.cv.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{cut},{},{},{cv},{}", r.mean, r.std, u8::from(r.undefined));
    }
    out
}
