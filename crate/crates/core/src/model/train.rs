//! Teacher-forced losses, batched gradients and the Adam optimizer, shared
//! by toy pre-training and adapter distillation.

use serde::{Deserialize, Serialize};

use super::forward::RunOptions;
use super::{Model, TokenSequence};
use crate::distill::AdapterSet;
use crate::error::{LabError, Result};
use crate::numerics::{log_softmax, softmax_in_place, Matrix, Rng};
use crate::par::{self, Parallelism};

/// A prompt with its target continuation laid out for teacher forcing:
/// the model sees `prompt ++ target[..n-1]` and position `prompt_len-1+i`
/// predicts `target[i]`.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    pub seq: TokenSequence,
    pub prompt_len: usize,
    pub targets: Vec<usize>,
}

impl TeacherForced {
    /// `None` for an empty target.
    pub fn new(prompt: &TokenSequence, targets: &[usize]) -> Option<Self> {
        if targets.is_empty() || prompt.is_empty() {
            return None;
        }
        Some(Self {
            seq: prompt.with_appended_text(&targets[..targets.len() - 1]),
            prompt_len: prompt.len(),
            targets: targets.to_vec(),
        })
    }

    fn predicted_positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.targets
            .iter()
            .enumerate()
            .map(|(i, &t)| (self.prompt_len - 1 + i, t))
    }
}

/// Training objective.
#[derive(Clone, Debug)]
pub enum Objective {
    /// Cross-entropy against the target ids.
    HardTarget,
    /// KL(teacher ‖ student) against stored teacher distributions, one per
    /// predicted position of each example.
    SoftLogits(Vec<Vec<Vec<f64>>>),
}

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    Base,
    Adapters,
}

/// Adam with bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Summed loss, predicted-token count and gradient for one example.
pub(crate) fn example_gradient(
    model: &Model,
    ex: &TeacherForced,
    soft: Option<&[Vec<f64>]>,
    cut: Option<usize>,
    adapters: Option<&AdapterSet>,
    target: GradTarget,
) -> Result<(f64, usize, Vec<f64>)> {
    let rec = model.train_pass(
        &ex.seq,
        RunOptions { cut, adapters },
    )?;
    let row_of = |pos: usize| rec.final_positions.iter().position(|&p| p == pos);
    let mut dlogits = Matrix::zeros(rec.logits.rows(), rec.logits.cols());
    let mut loss = 0.0;
    let mut count = 0;
    for (i, (pos, tgt)) in ex.predicted_positions().enumerate() {
        let r = row_of(pos).ok_or_else(|| {
            LabError::Protocol(format!("predicting position {pos} was removed by truncation"))
        })?;
        let logits = rec.logits.row(r);
        let logp = log_softmax(logits);
        let mut p = logits.to_vec();
        softmax_in_place(&mut p);
        let drow = dlogits.row_mut(r);
        match soft {
            None => {
                loss -= logp[tgt];
                drow.copy_from_slice(&p);
                drow[tgt] -= 1.0;
            }
            Some(teacher) => {
                let pt = &teacher[i];
                for j in 0..p.len() {
                    if pt[j] > 0.0 {
                        loss += pt[j] * (pt[j].ln() - logp[j]);
                    }
                    drow[j] = p[j] - pt[j];
                }
            }
        }
        count += 1;
    }
    let n = match target {
        GradTarget::Base => model.params().len(),
        GradTarget::Adapters => adapters.map_or(0, AdapterSet::len),
    };
    let mut grads = vec![0.0; n];
    match target {
        GradTarget::Base => model.backward(&rec, ex.seq.tokens(), &dlogits, adapters, Some(&mut grads), None),
        GradTarget::Adapters => model.backward(&rec, ex.seq.tokens(), &dlogits, adapters, None, Some(&mut grads)),
    }
    Ok((loss, count, grads))
}

/// Mean per-token loss and gradient over a batch. Per-example work may run
/// in parallel; the reduction is always in example order.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradient(
    model: &Model,
    batch: &[&TeacherForced],
    objective: &Objective,
    soft_index: &[usize],
    cut: Option<usize>,
    adapters: Option<&AdapterSet>,
    target: GradTarget,
    mode: Parallelism,
) -> Result<(f64, Vec<f64>)> {
    let results = par::try_map_indexed(mode, batch.len(), |i| {
        let soft = match objective {
            Objective::HardTarget => None,
            Objective::SoftLogits(all) => Some(all[soft_index[i]].as_slice()),
        };
        example_gradient(model, batch[i], soft, cut, adapters, target)
    })?;
    let mut total_loss = 0.0;
    let mut total_count = 0usize;
    let mut grads: Vec<f64> = Vec::new();
    for (loss, count, g) in results {
        total_loss += loss;
        total_count += count;
        if grads.is_empty() {
            grads = g;
        } else {
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
    if total_count == 0 {
        return Err(LabError::Training("batch has no predicted tokens".into()));
    }
    let inv = 1.0 / total_count as f64;
    for g in &mut grads {
        *g *= inv;
    }
    let loss = total_loss * inv;
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(LabError::Training(format!(
            "non-finite loss {loss} over {total_count} tokens"
        )));
    }
    Ok((loss, grads))
}

/// Settings for the optional toy pre-training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            lr: 3e-3,
            seed: 17,
        }
    }
}

/// Next-token pre-training of every base parameter. Returns the trained
/// model and the per-step loss.
pub fn pretrain(
    model: &Model,
    examples: &[TeacherForced],
    cfg: &PretrainConfig,
    mode: Parallelism,
) -> Result<(Model, Vec<f64>)> {
    if examples.is_empty() {
        return Err(LabError::Training("no pre-training examples".into()));
    }
    let mut params = model.params().to_vec();
    let mut current = model.clone();
    let mut adam = Adam::new(params.len(), cfg.lr);
    let mut rng = Rng::new(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let bs = cfg.batch_size.clamp(1, examples.len());
    for _ in 0..cfg.steps {
        let batch: Vec<&TeacherForced> = (0..bs).map(|_| &examples[rng.below(examples.len())]).collect();
        let (loss, grads) = batch_gradient(
            &current,
            &batch,
            &Objective::HardTarget,
            &[],
            None,
            None,
            GradTarget::Base,
            mode,
        )?;
        adam.step(&mut params, &grads);
        current = current.with_params(params.clone())?;
        losses.push(loss);
    }
    Ok((current, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Model {
        Model::build(ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_mlp: 12,
            vocab: 112,
            image_tokens: 3,
            max_seq: 24,
            seed: 4,
        })
        .unwrap()
    }

    fn example(m: &Model, cut_text: &str, target: &str) -> TeacherForced {
        let prompt = TokenSequence::multimodal(&[0.2, 0.5, 0.9], cut_text, m.config()).unwrap();
        let t = m.vocab().encode_text(target).unwrap();
        TeacherForced::new(&prompt, &t).unwrap()
    }

    fn loss_of(m: &Model, ex: &TeacherForced, cut: Option<usize>) -> f64 {
        let (l, n, _) = example_gradient(m, ex, None, cut, None, GradTarget::Base).unwrap();
        l / n as f64
    }

    #[test]
    fn empty_target_is_none() {
        let m = tiny();
        let p = TokenSequence::multimodal(&[0.2, 0.5, 0.9], "q", m.config()).unwrap();
        assert!(TeacherForced::new(&p, &[]).is_none());
    }

    #[test]
    fn base_gradients_match_finite_differences() {
        let m = tiny();
        for cut in [None, Some(1), Some(0)] {
            let ex = example(&m, "ab", "xyz");
            let (_, n, g) = example_gradient(&m, &ex, None, cut, None, GradTarget::Base).unwrap();
            let g: Vec<f64> = g.iter().map(|v| v / n as f64).collect();
            let mut rng = Rng::new(11);
            // sample coordinates across every tensor
            let total = m.params().len();
            for _ in 0..150 {
                let i = rng.below(total);
                let h = 1e-5;
                let mut p = m.params().to_vec();
                p[i] += h;
                let lp = loss_of(&m.with_params(p.clone()).unwrap(), &ex, cut);
                p[i] -= 2.0 * h;
                let lm = loss_of(&m.with_params(p).unwrap(), &ex, cut);
                let fd = (lp - lm) / (2.0 * h);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                assert!(err <= 1e-4 || (fd - g[i]).abs() < 1e-9, "coord {i} cut {cut:?}: fd {fd} analytic {}", g[i]);
            }
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut adam = Adam::new(2, 0.1);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[2.0, -3.0]);
        assert!((p[0] - 0.9).abs() < 1e-9);
        assert!((p[1] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn pretraining_reduces_loss() {
        let m = tiny();
        let exs = vec![example(&m, "c?", "red"), example(&m, "s?", "dot")];
        let cfg = PretrainConfig {
            steps: 60,
            batch_size: 2,
            lr: 1e-2,
            seed: 1,
        };
        let (_, losses) = pretrain(&m, &exs, &cfg, Parallelism::Sequential).unwrap();
        assert!(losses.last().unwrap() < &(0.5 * losses[0]));
    }
}
