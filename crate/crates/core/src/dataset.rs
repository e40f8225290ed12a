//! Synthetic scenes and the four task families used by the sweeps: colour
//! multiple choice, shape VQA, captioning and tagged reasoning chains.
//!
//! A scene is one coloured shape on the patch grid. Patch intensities are
//! the colour's level on shape cells and `0` elsewhere.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::eval_metrics::{Reference, TextMetric};
use crate::model::train::TeacherForced;
use crate::model::{ModelConfig, TokenSequence, Vocab, EOS};
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Line,
    Dot,
    Cross,
}

const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
const SHAPES: [Shape; 4] = [Shape::Square, Shape::Line, Shape::Dot, Shape::Cross];
const LETTERS: [&str; 4] = ["a", "b", "c", "d"];

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn level(self) -> f64 {
        match self {
            Color::Red => 0.3,
            Color::Green => 0.5,
            Color::Blue => 0.7,
            Color::Yellow => 0.9,
        }
    }

    fn index(self) -> usize {
        COLORS.iter().position(|&c| c == self).expect("listed")
    }
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Line => "line",
            Shape::Dot => "dot",
            Shape::Cross => "cross",
        }
    }

    fn index(self) -> usize {
        SHAPES.iter().position(|&s| s == self).expect("listed")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub color: Color,
    pub shape: Shape,
    /// Cell used by `Dot`, row-major.
    pub anchor: usize,
}

impl Scene {
    /// Patch intensities on a `w × h` grid with `w = ⌊√n⌋`, truncated to `n`
    /// patches.
    pub fn render(&self, n: usize) -> Vec<f64> {
        let w = (n as f64).sqrt().floor().max(1.0) as usize;
        let h = n.div_ceil(w);
        let (mr, mc) = (h / 2, w / 2);
        (0..n)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                let on = match self.shape {
                    Shape::Square => (r > 0 || h == 1) && r + 1 < h.max(2) && (c > 0 || w == 1) && c + 1 < w.max(2),
                    Shape::Line => r == mr,
                    Shape::Dot => i == self.anchor % n,
                    Shape::Cross => r == mr || c == mc,
                };
                if on {
                    self.color.level()
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn caption(&self) -> String {
        format!("a {} {}", self.color.name(), self.shape.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mcq,
    Vqa,
    Caption,
    Chain,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Mcq => "mcq",
            TaskKind::Vqa => "vqa",
            TaskKind::Caption => "caption",
            TaskKind::Chain => "chain",
        }
    }

    /// Metrics a sweep uses when none are requested.
    pub fn default_metrics(self) -> Vec<TextMetric> {
        match self {
            TaskKind::Mcq => vec![TextMetric::ExactMatch],
            TaskKind::Vqa => vec![TextMetric::IndexAnswer],
            TaskKind::Caption | TaskKind::Chain => vec![
                TextMetric::Similarity,
                TextMetric::Bleu,
                TextMetric::Rouge1,
                TextMetric::Rouge2,
                TextMetric::RougeL,
            ],
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcq" => Ok(TaskKind::Mcq),
            "vqa" => Ok(TaskKind::Vqa),
            "caption" => Ok(TaskKind::Caption),
            "chain" => Ok(TaskKind::Chain),
            other => Err(LabError::Config(format!(
                "unknown task {other:?} (expected mcq, vqa, caption or chain)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub kind: TaskKind,
    pub scene: Scene,
    pub patches: Vec<f64>,
    pub prompt: String,
    pub target: String,
    pub reference: Reference,
}

impl Sample {
    pub fn sequence(&self, cfg: &ModelConfig) -> Result<TokenSequence> {
        TokenSequence::multimodal(&self.patches, &self.prompt, cfg)
    }

    /// Teacher-forcing layout of `prompt → target EOS`.
    pub fn teacher_forced(&self, cfg: &ModelConfig) -> Result<TeacherForced> {
        let mut ids = Vocab::new(cfg).encode_text(&self.target)?;
        ids.push(EOS);
        let seq = self.sequence(cfg)?;
        if seq.len() + ids.len() > cfg.max_seq {
            return Err(LabError::Length {
                len: seq.len() + ids.len(),
                max: cfg.max_seq,
            });
        }
        TeacherForced::new(&seq, &ids).ok_or_else(|| LabError::Data("empty sample".into()))
    }
}

fn build_sample(id: usize, kind: TaskKind, scene: Scene, n_patches: usize) -> Sample {
    let (prompt, target, reference) = match kind {
        TaskKind::Mcq => {
            let letter = LETTERS[scene.color.index()];
            (
                "color? a:red b:green c:blue d:yellow".to_string(),
                letter.to_string(),
                Reference::text(letter),
            )
        }
        TaskKind::Vqa => {
            let letter = LETTERS[scene.shape.index()];
            (
                "which shape? (a) square (b) line (c) dot (d) cross".to_string(),
                format!("({letter}) {}", scene.shape.name()),
                Reference {
                    text: scene.shape.name().to_string(),
                    index: Some(letter.to_string()),
                },
            )
        }
        TaskKind::Caption => ("caption:".to_string(), scene.caption(), Reference::text(scene.caption())),
        TaskKind::Chain => {
            let target = format!(
                "<summary>name the shape</summary><caption>{}</caption>\
                 <reasoning>{} cells form a {}</reasoning><conclusion>{}</conclusion>",
                scene.caption(),
                scene.color.name(),
                scene.shape.name(),
                scene.shape.name()
            );
            ("explain:".to_string(), target.clone(), Reference::text(target))
        }
    };
    Sample {
        id,
        kind,
        scene,
        patches: scene.render(n_patches),
        prompt,
        target,
        reference,
    }
}

/// `n` samples of one task. Scenes cycle through all 16 colour/shape
/// combinations in a seeded order.
pub fn make_dataset(cfg: &ModelConfig, kind: TaskKind, n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(LabError::Data("dataset size must be positive".into()));
    }
    if cfg.image_tokens == 0 {
        return Err(LabError::Config("synthetic scenes need at least one image token".into()));
    }
    let mut rng = Rng::new(seed);
    let mut order: Vec<usize> = (0..16).collect();
    let mut out = Vec::with_capacity(n);
    for id in 0..n {
        if id % 16 == 0 {
            for i in (1..order.len()).rev() {
                order.swap(i, rng.below(i + 1));
            }
        }
        let combo = order[id % 16];
        let scene = Scene {
            color: COLORS[combo % 4],
            shape: SHAPES[combo / 4],
            anchor: rng.below(cfg.image_tokens),
        };
        let s = build_sample(id, kind, scene, cfg.image_tokens);
        s.sequence(cfg)?;
        out.push(s);
    }
    Ok(out)
}

/// A mixed-task corpus used for toy pre-training.
pub fn pretraining_corpus(cfg: &ModelConfig, per_task: usize, seed: u64) -> Result<Vec<TeacherForced>> {
    let mut out = Vec::new();
    for (i, kind) in [TaskKind::Mcq, TaskKind::Vqa, TaskKind::Caption, TaskKind::Chain]
        .into_iter()
        .enumerate()
    {
        for s in make_dataset(cfg, kind, per_task, crate::numerics::derive_seed(seed, i as u64))? {
            match s.teacher_forced(cfg) {
                Ok(tf) => out.push(tf),
                Err(LabError::Length { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    if out.is_empty() {
        return Err(LabError::Data("no pre-training example fits the context".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_on_4x4() {
        let s = Scene {
            color: Color::Blue,
            shape: Shape::Cross,
            anchor: 0,
        };
        let p = s.render(16);
        let on: Vec<usize> = (0..16).filter(|&i| p[i] > 0.0).collect();
        assert_eq!(on, vec![2, 6, 8, 9, 10, 11, 14]);
        let sq = Scene { shape: Shape::Square, ..s }.render(16);
        assert_eq!((0..16).filter(|&i| sq[i] > 0.0).collect::<Vec<_>>(), vec![5, 6, 9, 10]);
    }

    #[test]
    fn datasets_are_seeded_and_fit() {
        let cfg = ModelConfig::default();
        for kind in [TaskKind::Mcq, TaskKind::Vqa, TaskKind::Caption, TaskKind::Chain] {
            let a = make_dataset(&cfg, kind, 20, 3).unwrap();
            assert_eq!(a, make_dataset(&cfg, kind, 20, 3).unwrap());
            for s in &a {
                s.teacher_forced(&cfg).unwrap();
            }
        }
        let v = make_dataset(&cfg, TaskKind::Vqa, 4, 1).unwrap();
        for s in &v {
            let r = crate::eval_metrics::index_answer_match(&s.target, s.reference.index.as_deref().unwrap(), &s.reference.text);
            assert_eq!(r.unwrap(), 1.0);
        }
        assert!("nope".parse::<TaskKind>().is_err());
    }

    #[test]
    fn chain_targets_are_well_formed() {
        let cfg = ModelConfig::default();
        for s in make_dataset(&cfg, TaskKind::Chain, 16, 0).unwrap() {
            assert!(crate::eval_metrics::parse_reasoning_chain(&s.target).well_formed);
        }
    }
}
