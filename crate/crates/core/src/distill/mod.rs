//! Recovery of a visually truncated student by distillation: low-rank
//! adapters on the query and value projections are trained so the student
//! reproduces the full teacher's greedy outputs.

mod adapter;
mod checkpoint;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use adapter::{AdapterSet, AdapterTarget};
pub use checkpoint::{read_adapters, write_adapters, ADAPTER_MAGIC, ADAPTER_VERSION};

use crate::decoding::{generate_batch, mean_score, DecodeConfig};
use crate::error::{LabError, Result};
use crate::eval_metrics::{Reference, TextMetric};
use crate::model::train::{batch_gradient, Adam, GradTarget, Objective, TeacherForced};
use crate::model::{Model, RunOptions, TokenSequence, EOS};
use crate::numerics::{derive_seed, softmax_in_place, Matrix, Rng};
use crate::par::{try_map_indexed, Parallelism};

/// Distillation loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillObjective {
    /// Cross-entropy against the teacher's greedy tokens.
    #[default]
    Hard,
    /// KL divergence to the teacher's full next-token distribution.
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub rank: usize,
    pub alpha: f64,
    pub lr: f64,
    pub steps: usize,
    /// Examples per step; the whole set when at least its size.
    pub batch_size: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub objective: DistillObjective,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            lr: 1e-3,
            steps: 200,
            batch_size: 16,
            max_new_tokens: 16,
            seed: 0,
            objective: DistillObjective::Hard,
        }
    }
}

/// A teacher output: its text and the ids to imitate, EOS included when the
/// teacher stopped on it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherTarget {
    pub text: String,
    pub tokens: Vec<usize>,
}

/// Greedy teacher generations, one per prompt.
pub fn make_targets(
    teacher: &Model,
    prompts: &[TokenSequence],
    max_new_tokens: usize,
    mode: Parallelism,
) -> Result<Vec<TeacherTarget>> {
    let gens = generate_batch(teacher, prompts, None, &DecodeConfig::greedy(max_new_tokens), None, mode)?;
    Ok(gens
        .into_iter()
        .map(|g| {
            let mut tokens = g.tokens;
            if g.stopped_at_eos {
                tokens.push(EOS);
            }
            TeacherTarget { text: g.text, tokens }
        })
        .collect())
}

/// Teacher-forcing examples; prompts whose target is empty are skipped.
pub fn training_examples(prompts: &[TokenSequence], targets: &[TeacherTarget]) -> Result<Vec<TeacherForced>> {
    if prompts.len() != targets.len() {
        return Err(LabError::Argument("one target per prompt is required".into()));
    }
    let mut out = Vec::with_capacity(prompts.len());
    for (i, (p, t)) in prompts.iter().zip(targets).enumerate() {
        match TeacherForced::new(p, &t.tokens) {
            Some(ex) => out.push(ex),
            None => log::warn!("skipping example {i}: empty teacher target"),
        }
    }
    Ok(out)
}

/// Teacher next-token distributions at every predicted position.
pub fn teacher_distributions(teacher: &Model, examples: &[TeacherForced], mode: Parallelism) -> Result<Vec<Vec<Vec<f64>>>> {
    try_map_indexed(mode, examples.len(), |i| {
        let ex = &examples[i];
        let out = teacher.run(&ex.seq, RunOptions::default())?;
        Ok((0..ex.targets.len())
            .map(|k| {
                let mut p = out.logits.row(ex.prompt_len - 1 + k).to_vec();
                softmax_in_place(&mut p);
                p
            })
            .collect())
    })
}

/// Student logits: the truncated base with adapters applied.
pub fn adapter_forward(student: &Model, adapters: &AdapterSet, seq: &TokenSequence) -> Result<Matrix> {
    adapters.check_compatible(student)?;
    Ok(student
        .run(
            seq,
            RunOptions {
                cut: Some(adapters.cut()),
                adapters: Some(adapters),
            },
        )?
        .logits)
}

/// Mean per-token loss and its gradient with respect to the adapter factors.
pub fn adapter_loss_and_gradient(
    student: &Model,
    adapters: &AdapterSet,
    batch: &[&TeacherForced],
    objective: &Objective,
    soft_index: &[usize],
    mode: Parallelism,
) -> Result<(f64, Vec<f64>)> {
    adapters.check_compatible(student)?;
    batch_gradient(
        student,
        batch,
        objective,
        soft_index,
        Some(adapters.cut()),
        Some(adapters),
        GradTarget::Adapters,
        mode,
    )
}

/// One optimizer step on the adapters; returns the pre-step loss.
pub fn distill_step(
    student: &Model,
    adapters: &mut AdapterSet,
    adam: &mut Adam,
    batch: &[&TeacherForced],
    objective: &Objective,
    soft_index: &[usize],
    mode: Parallelism,
) -> Result<f64> {
    let (loss, grads) = adapter_loss_and_gradient(student, adapters, batch, objective, soft_index, mode)?;
    adam.step(adapters.params_mut(), &grads);
    Ok(loss)
}

/// Trained adapters and the loss before every step.
#[derive(Clone, Debug)]
pub struct TrainedAdapters {
    pub adapters: AdapterSet,
    pub losses: Vec<f64>,
}

/// Train fresh adapters for the student truncated at `cut`.
pub fn train_adapters(
    teacher: &Model,
    examples: &[TeacherForced],
    cut: usize,
    cfg: &DistillConfig,
    mode: Parallelism,
) -> Result<TrainedAdapters> {
    if examples.is_empty() {
        return Err(LabError::Training("no distillation examples".into()));
    }
    let mut adapters = AdapterSet::new(teacher, cfg.rank, cfg.alpha, cut, derive_seed(cfg.seed, cut as u64))?;
    let objective = match cfg.objective {
        DistillObjective::Hard => Objective::HardTarget,
        DistillObjective::Soft => Objective::SoftLogits(teacher_distributions(teacher, examples, mode)?),
    };
    let mut adam = Adam::new(adapters.len(), cfg.lr);
    let mut rng = Rng::new(derive_seed(cfg.seed, 1 << 32 | cut as u64));
    let full = cfg.batch_size >= examples.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = if full {
            (0..examples.len()).collect()
        } else {
            (0..cfg.batch_size.max(1)).map(|_| rng.below(examples.len())).collect()
        };
        let batch: Vec<&TeacherForced> = idx.iter().map(|&i| &examples[i]).collect();
        losses.push(distill_step(teacher, &mut adapters, &mut adam, &batch, &objective, &idx, mode)?);
    }
    Ok(TrainedAdapters { adapters, losses })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryPoint {
    pub cut: usize,
    /// Alignment of the truncated student before training.
    pub pre: f64,
    /// Alignment after training, `R(K)`.
    pub post: f64,
    /// Training objective before the first step.
    pub initial_loss: f64,
    /// Hard-target cross-entropy of the trained student on the training set.
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryCurve {
    pub metric: TextMetric,
    pub steps: usize,
    pub points: Vec<RecoveryPoint>,
}

/// Recovery curve plus the trained adapters, one per cut.
#[derive(Clone, Debug)]
pub struct RecoveryRun {
    pub curve: RecoveryCurve,
    pub adapters: Vec<AdapterSet>,
}

/// Train one student per cut on `train` and measure alignment with the
/// teacher's greedy outputs on `eval`, before and after training.
pub fn recovery_curve(
    teacher: &Model,
    train: &[TokenSequence],
    eval: &[TokenSequence],
    cuts: &[usize],
    metric: TextMetric,
    cfg: &DistillConfig,
    mode: Parallelism,
) -> Result<RecoveryRun> {
    if cuts.is_empty() || eval.is_empty() {
        return Err(LabError::Argument("recovery curve needs cuts and evaluation prompts".into()));
    }
    let mut cuts = cuts.to_vec();
    cuts.sort_unstable();
    cuts.dedup();
    let examples = training_examples(train, &make_targets(teacher, train, cfg.max_new_tokens, mode)?)?;
    let refs: Vec<Reference> = make_targets(teacher, eval, cfg.max_new_tokens, mode)?
        .into_iter()
        .map(|t| match metric {
            TextMetric::IndexAnswer => Reference::from_output(&t.text),
            _ => Reference::text(t.text),
        })
        .collect();
    let greedy = DecodeConfig::greedy(cfg.max_new_tokens);
    let align = |cut: usize, adapters: Option<&AdapterSet>| -> Result<f64> {
        let outs: Vec<String> = generate_batch(teacher, eval, Some(cut), &greedy, adapters, mode)?
            .into_iter()
            .map(|g| g.text)
            .collect();
        Ok(mean_score(metric, &outs, &refs)?.0)
    };
    let runs = try_map_indexed(mode, cuts.len(), |i| {
        let cut = cuts[i];
        let pre = align(cut, None)?;
        let trained = train_adapters(teacher, &examples, cut, cfg, mode)?;
        let post = align(cut, Some(&trained.adapters))?;
        let (final_loss, _) = adapter_loss_and_gradient(
            teacher,
            &trained.adapters,
            &examples.iter().collect::<Vec<_>>(),
            &Objective::HardTarget,
            &[],
            mode,
        )?;
        let point = RecoveryPoint {
            cut,
            pre,
            post,
            initial_loss: trained.losses.first().copied().unwrap_or(f64::NAN),
            final_loss,
        };
        Ok::<_, LabError>((point, trained.adapters))
    })?;
    let (points, adapters) = runs.into_iter().unzip();
    Ok(RecoveryRun {
        curve: RecoveryCurve {
            metric,
            steps: cfg.steps,
            points,
        },
        adapters,
    })
}

pub const RECOVERY_CSV_HEADER: &str = "K,pre,post,steps,metric";

pub fn recovery_csv(curve: &RecoveryCurve) -> String {
    let mut out = format!("{RECOVERY_CSV_HEADER}\n");
    for p in &curve.points {
        let _ = writeln!(out, "{},{},{},{},{}", p.cut, p.pre, p.post, curve.steps, curve.metric);
    }
    out
}
