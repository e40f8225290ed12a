use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::Model;
use crate::numerics::{seeded_gaussian, Rng};

/// Projection an adapter pair is attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterTarget {
    Query,
    Value,
}

/// Low-rank deltas on the query and value projections of every block.
///
/// For a projection `y = x·W + b` with `W: [d × d]`, the adapted output is
/// `y + (α/r)·(x·Aᵀ)·Bᵀ`, with `A: [r × d]` and `B: [d × r]`. Factors are
/// stored flat, block by block, in the order `A_q, B_q, A_v, B_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    rank: usize,
    alpha: f64,
    cut: usize,
    layers: usize,
    d_model: usize,
    data: Vec<f64>,
}

impl AdapterSet {
    /// Fresh adapters: `A ~ N(0, 1/d)`, `B = 0`.
    pub fn new(model: &Model, rank: usize, alpha: f64, cut: usize, seed: u64) -> Result<Self> {
        let cfg = model.config();
        let d = cfg.d_model;
        if rank == 0 || rank > d {
            return Err(LabError::Config(format!(
                "adapter rank {rank} must lie in 1..={d}"
            )));
        }
        if !alpha.is_finite() {
            return Err(LabError::Config("adapter alpha must be finite".into()));
        }
        if cut > cfg.layers {
            return Err(LabError::Config(format!(
                "truncation depth {cut} exceeds {} layers",
                cfg.layers
            )));
        }
        let mut set = Self {
            rank,
            alpha,
            cut,
            layers: cfg.layers,
            d_model: d,
            data: vec![0.0; cfg.layers * 4 * rank * d],
        };
        let mut rng = Rng::new(seed);
        for block in 0..cfg.layers {
            for target in [AdapterTarget::Query, AdapterTarget::Value] {
                let (at, len) = set.a_range(block, target);
                let g = seeded_gaussian(&mut rng, rank, d, 1.0 / (d as f64).sqrt())?;
                set.data[at..at + len].copy_from_slice(g.data());
            }
        }
        Ok(set)
    }

    pub(crate) fn from_parts(
        rank: usize,
        alpha: f64,
        cut: usize,
        layers: usize,
        d_model: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != layers * 4 * rank * d_model {
            return Err(LabError::Shape("adapter factor length mismatch".into()));
        }
        Ok(Self {
            rank,
            alpha,
            cut,
            layers,
            d_model,
            data,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `α / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Truncation depth the student was built for.
    pub fn cut(&self) -> usize {
        self.cut
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn params(&self) -> &[f64] {
        &self.data
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn block_base(&self, block: usize) -> usize {
        block * 4 * self.rank * self.d_model
    }

    pub(crate) fn a_range(&self, block: usize, target: AdapterTarget) -> (usize, usize) {
        let len = self.rank * self.d_model;
        let slot = match target {
            AdapterTarget::Query => 0,
            AdapterTarget::Value => 2,
        };
        (self.block_base(block) + slot * len, len)
    }

    pub(crate) fn b_range(&self, block: usize, target: AdapterTarget) -> (usize, usize) {
        let (a, len) = self.a_range(block, target);
        (a + len, len)
    }

    pub fn a(&self, block: usize, target: AdapterTarget) -> &[f64] {
        let (o, l) = self.a_range(block, target);
        &self.data[o..o + l]
    }

    pub fn b(&self, block: usize, target: AdapterTarget) -> &[f64] {
        let (o, l) = self.b_range(block, target);
        &self.data[o..o + l]
    }

    pub fn b_mut(&mut self, block: usize, target: AdapterTarget) -> &mut [f64] {
        let (o, l) = self.b_range(block, target);
        &mut self.data[o..o + l]
    }

    pub(crate) fn check_compatible(&self, model: &Model) -> Result<()> {
        let cfg = model.config();
        if cfg.layers != self.layers || cfg.d_model != self.d_model {
            return Err(LabError::Config(format!(
                "adapters built for {} layers × d {} do not fit model {} × {}",
                self.layers, self.d_model, cfg.layers, cfg.d_model
            )));
        }
        Ok(())
    }

    /// Fold the deltas into a copy of the base weights:
    /// `W ← W + (α/r)·Aᵀ·Bᵀ`.
    pub fn merge_into(&self, model: &Model) -> Result<Model> {
        self.check_compatible(model)?;
        let d = self.d_model;
        let r = self.rank;
        let s = self.scale();
        let mut params = model.params().to_vec();
        for (block, offs) in model.layout().blocks.iter().enumerate() {
            for (target, w) in [(AdapterTarget::Query, offs.wq), (AdapterTarget::Value, offs.wv)] {
                let a = self.a(block, target);
                let b = self.b(block, target);
                for i in 0..d {
                    for j in 0..d {
                        let mut acc = 0.0;
                        for k in 0..r {
                            acc += a[k * d + i] * b[j * r + k];
                        }
                        params[w + i * d + j] += s * acc;
                    }
                }
            }
        }
        model.with_params(params)
    }
}
