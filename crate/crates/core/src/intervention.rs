//! Cross-layer substitution and image-token truncation experiments.
//!
//! A hybrid state takes the image rows of `H_{l_a}` and the text rows of
//! `H_{l_b}` and is pushed through the remaining blocks, reusing the base
//! KV cache below the resume layer. Truncation at `l_c` drops image rows
//! before block `l_c + 1`; surviving rows keep their original position ids.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decoding::{decode, mean_score, DecodeConfig, Generation};
use crate::error::{LabError, Result};
use crate::eval_metrics::{Reference, TextMetric};
use crate::model::{LayerStates, Model, Modality, PromptState, RunOptions, TokenSequence};
use crate::numerics::Matrix;
use crate::par::{try_map_indexed, Parallelism};

/// Image rows from `image_layer`, text rows from `text_layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridSpec {
    pub image_layer: usize,
    pub text_layer: usize,
    /// Layer whose output the hybrid replaces; defaults to the deeper source.
    pub resume: Option<usize>,
}

impl HybridSpec {
    pub fn new(image_layer: usize, text_layer: usize) -> Self {
        Self {
            image_layer,
            text_layer,
            resume: None,
        }
    }

    pub fn resume_layer(&self) -> usize {
        self.resume.unwrap_or(self.image_layer.max(self.text_layer))
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        for (name, l) in [
            ("image", self.image_layer),
            ("text", self.text_layer),
            ("resume", self.resume_layer()),
        ] {
            if l > layers {
                return Err(LabError::Argument(format!(
                    "{name} layer {l} exceeds model depth {layers}"
                )));
            }
        }
        Ok(())
    }
}

/// Cut layer `l_c`; `l_c = L` disables truncation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationSpec {
    pub cut: usize,
}

impl TruncationSpec {
    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.cut > layers {
            return Err(LabError::Argument(format!(
                "cut layer {} exceeds model depth {layers}",
                self.cut
            )));
        }
        Ok(())
    }
}

/// Assemble the hybrid matrix. Both source layers must hold the full,
/// untruncated sequence.
pub fn build_hybrid(states: &LayerStates, spec: &HybridSpec, seq: &TokenSequence) -> Result<Matrix> {
    let layers = states.len().saturating_sub(1);
    spec.validate(layers)?;
    let (la, lb) = (spec.image_layer, spec.text_layer);
    let full: Vec<usize> = (0..seq.len()).collect();
    for l in [la, lb] {
        if states.positions[l] != full || states.modality != seq.modality() {
            return Err(LabError::Protocol(format!(
                "layer {l} does not hold the full {}-token sequence",
                seq.len()
            )));
        }
    }
    let mut out = states.hidden[lb].clone();
    for i in seq.image_indices() {
        out.row_mut(i).copy_from_slice(states.hidden[la].row(i));
    }
    Ok(out)
}

/// Prompt state after forwarding the hybrid from its resume layer.
pub fn hybrid_prompt(
    model: &Model,
    seq: &TokenSequence,
    base: &PromptState,
    states: &LayerStates,
    spec: &HybridSpec,
) -> Result<PromptState> {
    let hybrid = build_hybrid(states, spec, seq)?;
    model.resume(
        hybrid,
        (0..seq.len()).collect(),
        seq.modality(),
        spec.resume_layer(),
        &base.cache,
        RunOptions::default(),
    )
}

/// Greedy generation from a hybrid state.
pub fn hybrid_generate(model: &Model, seq: &TokenSequence, spec: &HybridSpec, max_new_tokens: usize) -> Result<Generation> {
    let (base, states) = model.prefill(seq, RunOptions::default())?;
    let prompt = hybrid_prompt(model, seq, &base, &states, spec)?;
    decode(model, &prompt, &DecodeConfig::greedy(max_new_tokens), None)
}

/// Where a hybrid resumes when its sources differ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResumePolicy {
    /// The deeper of the two source layers.
    #[default]
    Deeper,
    /// The layer whose rows are kept (the substitution target).
    Receiver,
}

/// Mean scores over prompts for every `(l_a, l_b)` pair.
///
/// `image(l_a, l_b)`: image rows borrowed from `l_a` into layer `l_b`.
/// `text(l_a, l_b)`: text rows borrowed from `l_a` into layer `l_b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionGrid {
    /// Grid side, `L + 1`.
    pub side: usize,
    pub metric: TextMetric,
    pub policy: ResumePolicy,
    pub prompts: usize,
    pub image: Vec<f64>,
    pub text: Vec<f64>,
}

impl SubstitutionGrid {
    pub fn image(&self, la: usize, lb: usize) -> f64 {
        self.image[la * self.side + lb]
    }

    pub fn text(&self, la: usize, lb: usize) -> f64 {
        self.text[la * self.side + lb]
    }

    fn gap_mean(&self, grid: &[f64], gap: usize) -> f64 {
        let vals: Vec<f64> = (0..self.side)
            .flat_map(|a| (0..self.side).map(move |b| (a, b)))
            .filter(|&(a, b)| a.abs_diff(b) == gap)
            .map(|(a, b)| grid[a * self.side + b])
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// Mean image and text scores at each layer gap `|l_a − l_b|`.
    pub fn gap_curves(&self) -> Vec<(usize, f64, f64)> {
        (0..self.side)
            .map(|g| (g, self.gap_mean(&self.image, g), self.gap_mean(&self.text, g)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct GridOptions {
    pub metric: TextMetric,
    pub max_new_tokens: usize,
    pub policy: ResumePolicy,
    pub mode: Parallelism,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            metric: TextMetric::Similarity,
            max_new_tokens: 16,
            policy: ResumePolicy::Deeper,
            mode: Parallelism::default(),
        }
    }
}

/// Generate from every hybrid under greedy decoding and score it against
/// the unmodified base output of the same prompt.
pub fn substitution_grid(model: &Model, prompts: &[TokenSequence], opts: &GridOptions) -> Result<SubstitutionGrid> {
    if prompts.is_empty() {
        return Err(LabError::Argument("substitution grid needs at least one prompt".into()));
    }
    let side = model.layers() + 1;
    let greedy = DecodeConfig::greedy(opts.max_new_tokens);
    let bases = try_map_indexed(opts.mode, prompts.len(), |p| {
        let (base, states) = model.prefill(&prompts[p], RunOptions::default())?;
        let reference = decode(model, &base, &greedy, None)?.text;
        Ok::<_, LabError>((base, states, Reference::text(reference)))
    })?;
    // job = ((kind * side + la) * side + lb) * prompts + p
    let np = prompts.len();
    let texts = try_map_indexed(opts.mode, 2 * side * side * np, |job| {
        let (p, rest) = (job % np, job / np);
        let (lb, rest) = (rest % side, rest / side);
        let (la, kind) = (rest % side, rest / side);
        let mut spec = if kind == 0 {
            HybridSpec::new(la, lb)
        } else {
            HybridSpec::new(lb, la)
        };
        if opts.policy == ResumePolicy::Receiver {
            spec.resume = Some(lb);
        }
        if opts.policy == ResumePolicy::Deeper && kind == 1 {
            // Same hybrid as the image grid's transpose; reuse that job.
            return Ok(None);
        }
        let (base, states, _) = &bases[p];
        let prompt = hybrid_prompt(model, &prompts[p], base, states, &spec)?;
        decode(model, &prompt, &greedy, None).map(|g| Some(g.text))
    })?;
    let refs: Vec<Reference> = bases.into_iter().map(|(_, _, r)| r).collect();
    let mut image = vec![0.0; side * side];
    let mut text = vec![0.0; side * side];
    let out_at = |kind: usize, la: usize, lb: usize| -> Vec<String> {
        let at = ((kind * side + la) * side + lb) * np;
        texts[at..at + np]
            .iter()
            .map(|t| t.clone().expect("computed"))
            .collect()
    };
    for la in 0..side {
        for lb in 0..side {
            image[la * side + lb] = mean_score(opts.metric, &out_at(0, la, lb), &refs)?.0;
            let t = if opts.policy == ResumePolicy::Deeper {
                out_at(0, lb, la)
            } else {
                out_at(1, la, lb)
            };
            text[la * side + lb] = mean_score(opts.metric, &t, &refs)?.0;
        }
    }
    Ok(SubstitutionGrid {
        side,
        metric: opts.metric,
        policy: opts.policy,
        prompts: np,
        image,
        text,
    })
}

pub fn substitution_csv(grid: &SubstitutionGrid) -> String {
    let mut out = String::from("l_a,l_b,image_sub_score,text_sub_score\n");
    for la in 0..grid.side {
        for lb in 0..grid.side {
            let _ = writeln!(out, "{la},{lb},{},{}", grid.image(la, lb), grid.text(la, lb));
        }
    }
    out
}

pub fn gap_csv(grid: &SubstitutionGrid) -> String {
    let mut out = String::from("gap,image_score,text_score\n");
    for (g, i, t) in grid.gap_curves() {
        let _ = writeln!(out, "{g},{i},{t}");
    }
    out
}

/// Sequence length and position ids of every captured layer, plus the
/// per-block KV-cache lengths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeTrace {
    pub seq_lens: Vec<usize>,
    pub positions: Vec<Vec<usize>>,
    pub cache_lens: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TruncatedOutput {
    pub logits: Matrix,
    pub states: LayerStates,
    pub trace: ShapeTrace,
}

pub fn truncate_forward(model: &Model, seq: &TokenSequence, spec: &TruncationSpec) -> Result<TruncatedOutput> {
    spec.validate(model.layers())?;
    let out = model.run(seq, RunOptions::truncated(spec.cut))?;
    let trace = ShapeTrace {
        seq_lens: out.states.seq_lens(),
        positions: out.states.positions.clone(),
        cache_lens: out.cache.layer_lengths(),
    };
    Ok(TruncatedOutput {
        logits: out.logits,
        states: out.states,
        trace,
    })
}

/// Scores at one cut, one entry per metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub cut: usize,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthTable {
    pub metrics: Vec<TextMetric>,
    pub rows: Vec<DepthRow>,
    /// Greedy outputs per cut, prompt-major within each cut.
    pub outputs: Vec<Vec<String>>,
}

impl DepthTable {
    pub fn score(&self, cut_idx: usize, metric: TextMetric) -> Option<f64> {
        let m = self.metrics.iter().position(|&x| x == metric)?;
        self.rows.get(cut_idx).map(|r| r.scores[m])
    }
}

/// Truncate at every cut in `cuts`, decode greedily and score against the
/// references.
pub fn depth_sweep(
    model: &Model,
    prompts: &[TokenSequence],
    references: &[Reference],
    cuts: &[usize],
    metrics: &[TextMetric],
    max_new_tokens: usize,
    mode: Parallelism,
) -> Result<DepthTable> {
    if prompts.is_empty() || metrics.is_empty() || cuts.is_empty() {
        return Err(LabError::Argument("depth sweep needs prompts, cuts and metrics".into()));
    }
    if prompts.len() != references.len() {
        return Err(LabError::Argument("one reference per prompt is required".into()));
    }
    for &c in cuts {
        TruncationSpec { cut: c }.validate(model.layers())?;
    }
    let np = prompts.len();
    let greedy = DecodeConfig::greedy(max_new_tokens);
    let texts = try_map_indexed(mode, cuts.len() * np, |job| {
        let (ci, p) = (job / np, job % np);
        crate::decoding::generate(model, &prompts[p], Some(cuts[ci]), &greedy, None).map(|g| g.text)
    })?;
    let mut rows = Vec::with_capacity(cuts.len());
    let mut outputs = Vec::with_capacity(cuts.len());
    for (ci, &cut) in cuts.iter().enumerate() {
        let outs = &texts[ci * np..(ci + 1) * np];
        let scores = metrics
            .iter()
            .map(|&m| mean_score(m, outs, references).map(|(v, _)| v))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(DepthRow { cut, scores });
        outputs.push(outs.to_vec());
    }
    Ok(DepthTable {
        metrics: metrics.to_vec(),
        rows,
        outputs,
    })
}

pub fn depth_csv(table: &DepthTable) -> String {
    let mut out = String::from("l_c,metric,value\n");
    for r in &table.rows {
        for (m, v) in table.metrics.iter().zip(&r.scores) {
            let _ = writeln!(out, "{},{m},{v}", r.cut);
        }
    }
    out
}

/// Modality tag of each row of a captured layer.
pub fn row_modalities(states: &LayerStates, layer: usize) -> Vec<Modality> {
    states.positions[layer].iter().map(|&p| states.modality[p]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::build(ModelConfig {
            layers: 3,
            d_model: 16,
            heads: 2,
            d_mlp: 32,
            image_tokens: 4,
            max_seq: 40,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn seq(m: &Model, t: &str) -> TokenSequence {
        TokenSequence::multimodal(&[0.2, 0.4, 0.6, 0.8], t, m.config()).unwrap()
    }

    #[test]
    fn hybrid_rows_come_from_sources() {
        let m = model();
        let s = seq(&m, "abc");
        let (_, states) = m.prefill(&s, RunOptions::default()).unwrap();
        let h = build_hybrid(&states, &HybridSpec::new(0, 2), &s).unwrap();
        for i in 0..s.len() {
            let src = if i < 4 { 0 } else { 2 };
            assert_eq!(h.row(i), states.hidden[src].row(i));
        }
        assert_eq!(HybridSpec::new(1, 3).resume_layer(), 3);
        assert!(build_hybrid(&states, &HybridSpec::new(0, 4), &s).is_err());
    }

    #[test]
    fn hybrid_needs_untruncated_states() {
        let m = model();
        let s = seq(&m, "ab");
        let out = m.run(&s, RunOptions::truncated(1)).unwrap();
        assert!(matches!(
            build_hybrid(&out.states, &HybridSpec::new(0, 2), &s),
            Err(LabError::Protocol(_))
        ));
    }

    #[test]
    fn identity_hybrids_reproduce_base() {
        let m = model();
        let s = seq(&m, "hi");
        let base = crate::decoding::generate(&m, &s, None, &DecodeConfig::greedy(8), None).unwrap();
        for l in 0..=3 {
            let g = hybrid_generate(&m, &s, &HybridSpec::new(l, l), 8).unwrap();
            assert_eq!(g.text, base.text);
        }
    }

    #[test]
    fn grid_diagonal_and_gap() {
        let m = model();
        let prompts = vec![seq(&m, "a"), seq(&m, "xy")];
        for policy in [ResumePolicy::Deeper, ResumePolicy::Receiver] {
            let opts = GridOptions {
                max_new_tokens: 5,
                policy,
                ..GridOptions::default()
            };
            let g = substitution_grid(&m, &prompts, &opts).unwrap();
            assert_eq!(g.image.len(), 16);
            for l in 0..4 {
                assert_eq!(g.image(l, l), 1.0);
                assert_eq!(g.text(l, l), 1.0);
            }
            assert_eq!(g.gap_curves()[0], (0, 1.0, 1.0));
            assert_eq!(substitution_csv(&g).lines().count(), 17);
        }
    }

    #[test]
    fn truncation_trace() {
        let m = model();
        let s = seq(&m, "abc");
        for cut in 0..=3 {
            let t = truncate_forward(&m, &s, &TruncationSpec { cut }).unwrap();
            let expected: Vec<usize> = (0..=3).map(|l| if l <= cut { 7 } else { 3 }).collect();
            assert_eq!(t.trace.seq_lens, expected);
            for l in cut + 1..=3 {
                assert_eq!(t.trace.positions[l], vec![4, 5, 6]);
                assert!(row_modalities(&t.states, l).iter().all(|&x| x == Modality::Text));
            }
        }
        assert!(truncate_forward(&m, &s, &TruncationSpec { cut: 4 }).is_err());
    }

    #[test]
    fn depth_sweep_shape() {
        let m = model();
        let prompts = vec![seq(&m, "a"), seq(&m, "b")];
        let refs = vec![Reference::text("x"), Reference::text("y")];
        let metrics = [TextMetric::ExactMatch, TextMetric::Bleu];
        let t = depth_sweep(&m, &prompts, &refs, &[0, 1, 2, 3], &metrics, 4, Parallelism::Rayon).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert!(t.rows.iter().all(|r| r.scores.len() == 2));
        let t2 = depth_sweep(&m, &prompts, &refs, &[0, 1, 2, 3], &metrics, 4, Parallelism::Sequential).unwrap();
        assert_eq!(t, t2);
        assert_eq!(depth_csv(&t).lines().count(), 9);
    }
}
