//! Deterministic toy decoder-only multimodal transformer.
//!
//! Pre-norm blocks (LayerNorm → multi-head causal attention → residual,
//! LayerNorm → GELU MLP → residual), learned absolute position embeddings,
//! an untied LM head. Image patches enter as tokens from a reserved range of
//! the vocabulary; text is byte-level over printable ASCII. The prompt layout
//! is always `[image tokens][text tokens]`.
//!
//! All parameters live in one flat `Vec<f64>` addressed through
//! [`ParamLayout`]; the checkpoint format and the optimizer both use that
//! order.

mod backward;
mod cache;
mod checkpoint;
mod forward;
mod tokenizer;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{seeded_gaussian, Rng};

pub use cache::{KvCache, LayerKv};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{ForwardOutput, LayerStates, PromptState, RunOptions};
pub use tokenizer::{Modality, TokenSequence, Vocab, EOS};


/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_mlp: usize,
    pub vocab: usize,
    pub image_tokens: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            d_model: 48,
            heads: 4,
            d_mlp: 96,
            vocab: 112,
            image_tokens: 16,
            max_seq: 192,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(LabError::Config(m));
        if self.layers < 2 {
            return fail(format!("need at least 2 layers, got {}", self.layers));
        }
        if self.vocab < 8 {
            return fail(format!("vocabulary must hold at least 8 ids, got {}", self.vocab));
        }
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_mlp == 0 {
            return fail("d_mlp must be positive".into());
        }
        if self.max_seq == 0 || self.image_tokens > self.max_seq {
            return fail(format!(
                "max_seq {} must be positive and hold {} image tokens",
                self.max_seq, self.image_tokens
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (d, m, v, s) = (self.d_model, self.d_mlp, self.vocab, self.max_seq);
        let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * m + m) + (m * d + d);
        v * d + s * d + self.layers * block + 2 * d + d * v
    }

    /// Stable FNV-1a hash of the configuration, used in run manifests.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        format!("{:016x}", crate::eval_metrics::fnv1a(json.as_bytes()))
    }
}

/// Offsets of one block's tensors inside the flat parameter vector.
#[derive(Clone, Debug)]
pub(crate) struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Flat parameter order: token embeddings `[vocab × d]`, position
/// embeddings `[max_seq × d]`, then per block `ln1.{g,b}`, `Wq, bq, Wk, bk,
/// Wv, bv, Wo, bo` (weights `[d_in × d_out]`), `ln2.{g,b}`, `W1 [d × d_mlp]`,
/// `b1`, `W2 [d_mlp × d]`, `b2`; finally `lnf.{g,b}` and `W_out [d × vocab]`.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) blocks: Vec<BlockOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) w_out: usize,
    pub(crate) total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, m) = (cfg.d_model, cfg.d_mlp);
        let mut off = 0usize;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let tok_emb = take(cfg.vocab * d);
        let pos_emb = take(cfg.max_seq * d);
        let blocks = (0..cfg.layers)
            .map(|_| BlockOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * m),
                b1: take(m),
                w2: take(m * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_out = take(d * cfg.vocab);
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
            total: off,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Immutable model: configuration plus flat parameters.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    vocab: Vocab,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl Model {
    /// Draw weights deterministically from `cfg.seed`.
    ///
    /// Embeddings are N(0, 1); linear weights N(0, 1/d_in); biases zero;
    /// LayerNorm gains one and shifts zero. Tensors are filled in layout
    /// order from a single generator stream.
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(&cfg);
        let mut params = vec![0.0; layout.total];
        let mut rng = Rng::new(cfg.seed);
        let (d, m, v) = (cfg.d_model, cfg.d_mlp, cfg.vocab);
        let mut fill = |params: &mut [f64], at: usize, rows: usize, cols: usize, scale: f64| {
            let g = seeded_gaussian(&mut rng, rows, cols, scale).expect("non-zero dims");
            params[at..at + rows * cols].copy_from_slice(g.data());
        };
        fill(&mut params, layout.tok_emb, v, d, 1.0);
        fill(&mut params, layout.pos_emb, cfg.max_seq, d, 1.0);
        let inv_d = 1.0 / (d as f64).sqrt();
        let inv_m = 1.0 / (m as f64).sqrt();
        for b in &layout.blocks {
            params[b.ln1_g..b.ln1_g + d].fill(1.0);
            params[b.ln2_g..b.ln2_g + d].fill(1.0);
            for w in [b.wq, b.wk, b.wv, b.wo] {
                fill(&mut params, w, d, d, inv_d);
            }
            fill(&mut params, b.w1, d, m, inv_d);
            fill(&mut params, b.w2, m, d, inv_m);
        }
        params[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        fill(&mut params, layout.w_out, d, v, inv_d);
        Ok(Self {
            vocab: Vocab::new(&cfg),
            cfg,
            layout,
            params,
        })
    }

    /// Replace the parameter vector (same layout).
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.layout.total {
            return Err(LabError::Shape(format!(
                "expected {} parameters, got {}",
                self.layout.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(LabError::Data("non-finite parameter".into()));
        }
        Ok(Self {
            cfg: self.cfg.clone(),
            vocab: self.vocab.clone(),
            layout: self.layout.clone(),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn layers(&self) -> usize {
        self.cfg.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    #[inline]
    pub(crate) fn p(&self, at: usize, len: usize) -> &[f64] {
        &self.params[at..at + len]
    }
}
