//! Forward pass, KV-cached stepping, hidden-state capture and the
//! truncation / resume entry points.
//!
//! Every kernel adds the floating-point operations it executes to a per-block
//! tally. The tally is what the analytic FLOP model is checked against, so the
//! kernels deliberately do dense work: attention scores are computed for every
//! (query, key) pair and masked afterwards.

use serde::{Deserialize, Serialize};

use super::backward::{BlockTape, HeadTape};
use super::cache::{KvCache, LayerKv};
use super::tokenizer::{Modality, TokenSequence};
use super::Model;
use crate::distill::{AdapterSet, AdapterTarget};
use crate::error::{LabError, Result};
use crate::numerics::{softmax_in_place, Matrix};

pub(crate) const LN_EPS: f64 = 1e-5;
/// Flops charged per element by each elementwise kernel.
pub(crate) const LN_FLOPS: u64 = 7;
pub(crate) const SOFTMAX_FLOPS: u64 = 5;
pub(crate) const GELU_FLOPS: u64 = 8;

/// Options for a prompt pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions<'a> {
    /// Cut layer: blocks after this layer see only text rows. `None` or
    /// `Some(L)` means no truncation.
    pub cut: Option<usize>,
    pub adapters: Option<&'a AdapterSet>,
}

impl<'a> RunOptions<'a> {
    pub fn truncated(cut: usize) -> Self {
        Self {
            cut: Some(cut),
            adapters: None,
        }
    }
}

/// Hidden states `H_0..H_L` with the original position id of every row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStates {
    pub hidden: Vec<Matrix>,
    pub positions: Vec<Vec<usize>>,
    /// Modality of every original position.
    pub modality: Vec<Modality>,
}

impl LayerStates {
    /// Number of captured layers (`L + 1` for a full pass).
    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn seq_len(&self, layer: usize) -> usize {
        self.hidden[layer].rows()
    }

    pub fn seq_lens(&self) -> Vec<usize> {
        self.hidden.iter().map(Matrix::rows).collect()
    }

    pub fn dim(&self) -> usize {
        self.hidden.first().map_or(0, Matrix::cols)
    }

    /// Row indices at `layer` whose token has modality `m`.
    pub fn rows_for(&self, layer: usize, m: Modality) -> Vec<usize> {
        self.positions[layer]
            .iter()
            .enumerate()
            .filter(|(_, &p)| self.modality[p] == m)
            .map(|(r, _)| r)
            .collect()
    }

    /// Positions of modality `m` present at `layer`.
    pub fn positions_for(&self, layer: usize, m: Modality) -> Vec<usize> {
        self.positions[layer]
            .iter()
            .copied()
            .filter(|&p| self.modality[p] == m)
            .collect()
    }

    pub fn modality_matrix(&self, layer: usize, m: Modality) -> Matrix {
        self.hidden[layer].select_rows(&self.rows_for(layer, m))
    }

    pub fn is_finite(&self) -> bool {
        self.hidden.iter().all(Matrix::is_finite)
    }
}

/// Final hidden rows, their positions, captured states, cache and per-block flops.
type PromptPass = (Matrix, Vec<usize>, LayerStates, KvCache, Vec<u64>);

/// Result of a prompt pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Logits for every row of the last layer.
    pub logits: Matrix,
    pub states: LayerStates,
    pub cache: KvCache,
    /// Flops executed by each decoder block, block 1 first.
    pub block_flops: Vec<u64>,
}

/// Everything decoding needs after a prompt pass.
#[derive(Clone, Debug)]
pub struct PromptState {
    pub logits: Vec<f64>,
    pub cache: KvCache,
}

pub(crate) struct TrainRecord {
    pub tapes: Vec<BlockTape>,
    pub head: HeadTape,
    pub logits: Matrix,
    /// Original position of every final-layer row.
    pub final_positions: Vec<usize>,
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

/// `x · W + b` with `W` stored `[d_in × d_out]`.
pub(crate) fn linear(x: &Matrix, w: &[f64], b: &[f64], d_out: usize, tally: &mut u64) -> Matrix {
    let d_in = x.cols();
    let mut out = Matrix::zeros(x.rows(), d_out);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let o = out.row_mut(r);
        o.copy_from_slice(b);
        *tally += d_out as u64;
        for (i, &xi) in xr.iter().enumerate() {
            let wi = &w[i * d_out..(i + 1) * d_out];
            for (oj, &wij) in o.iter_mut().zip(wi) {
                *oj += xi * wij;
            }
            *tally += 2 * d_out as u64;
        }
        debug_assert_eq!(xr.len(), d_in);
    }
    out
}

/// Adds `scale · (x · Aᵀ) · Bᵀ` to `y` and returns `u = x · Aᵀ`.
pub(crate) fn lora_add(
    x: &Matrix,
    a: &[f64],
    b: &[f64],
    rank: usize,
    scale: f64,
    y: &mut Matrix,
    tally: &mut u64,
) -> Matrix {
    let d_in = x.cols();
    let d_out = y.cols();
    let mut u = Matrix::zeros(x.rows(), rank);
    for r in 0..x.rows() {
        let xr = x.row(r);
        for k in 0..rank {
            u.set(r, k, crate::numerics::dot(xr, &a[k * d_in..(k + 1) * d_in]));
        }
        *tally += 2 * (rank * d_in) as u64;
        let ur = u.row(r).to_vec();
        let yr = y.row_mut(r);
        for (j, yj) in yr.iter_mut().enumerate() {
            let bj = &b[j * rank..(j + 1) * rank];
            *yj += scale * crate::numerics::dot(&ur, bj);
        }
        *tally += (2 * rank * d_out + 2 * d_out) as u64;
    }
    u
}

/// Row-wise LayerNorm. Returns the output plus per-row `(mean, 1/σ)`.
pub(crate) fn layer_norm(x: &Matrix, g: &[f64], b: &[f64], tally: &mut u64) -> (Matrix, Vec<(f64, f64)>) {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut stats = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (xr[j] - mean) * rstd * g[j] + b[j];
        }
        stats.push((mean, rstd));
        *tally += LN_FLOPS * d as u64;
    }
    (out, stats)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu(a: f64) -> f64 {
    0.5 * a * (1.0 + (GELU_C * (a + GELU_K * a * a * a)).tanh())
}

pub(crate) fn gelu_grad(a: f64) -> f64 {
    let t = (GELU_C * (a + GELU_K * a * a * a)).tanh();
    0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * a * a)
}

fn add_in_place(x: &mut Matrix, y: &Matrix, tally: &mut u64) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
    *tally += y.data().len() as u64;
}

/// Causal multi-head attention of `q` rows against all cached keys.
/// Key `j` is visible to query `i` iff `key_pos[j] <= q_pos[i]`.
/// Returns the concatenated head outputs and, per head, the `n × m`
/// probability matrix.
fn attention(
    q: &Matrix,
    q_pos: &[usize],
    kv: &LayerKv,
    heads: usize,
    tally: &mut u64,
) -> (Matrix, Vec<Matrix>) {
    let (n, d) = q.shape();
    let m = kv.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let off = h * dh;
        let mut p = Matrix::zeros(n, m);
        for i in 0..n {
            let qi = &q.row(i)[off..off + dh];
            let row = p.row_mut(i);
            for j in 0..m {
                let kj = &kv.keys[j * d + off..j * d + off + dh];
                let s = crate::numerics::dot(qi, kj) * scale;
                row[j] = if kv.positions[j] <= q_pos[i] {
                    s
                } else {
                    f64::NEG_INFINITY
                };
            }
            softmax_in_place(row);
            let oi = &mut out.row_mut(i)[off..off + dh];
            for (j, &pij) in p.row(i).iter().enumerate() {
                let vj = &kv.values[j * d + off..j * d + off + dh];
                for (o, &v) in oi.iter_mut().zip(vj) {
                    *o += pij * v;
                }
            }
        }
        // scores 2·dh, scale 1, softmax, mix 2·dh per (i, j)
        *tally += (n * m) as u64 * (4 * dh as u64 + 1 + SOFTMAX_FLOPS);
        probs.push(p);
    }
    (out, probs)
}

// ---------------------------------------------------------------------------
// model passes
// ---------------------------------------------------------------------------

impl Model {
    fn check_tokens(&self, tokens: &[usize], start: usize) -> Result<()> {
        let max = self.cfg.max_seq;
        if start + tokens.len() > max {
            return Err(LabError::Length {
                len: start + tokens.len(),
                max,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(LabError::Vocab {
                id,
                vocab: self.cfg.vocab,
            });
        }
        Ok(())
    }

    fn check_cut(&self, cut: Option<usize>) -> Result<()> {
        if let Some(c) = cut {
            if c > self.cfg.layers {
                return Err(LabError::Argument(format!(
                    "cut layer {c} exceeds layer count {}",
                    self.cfg.layers
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn embed(&self, tokens: &[usize], positions: &[usize]) -> Matrix {
        let d = self.cfg.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (r, (&t, &p)) in tokens.iter().zip(positions).enumerate() {
            let te = self.p(self.layout.tok_emb + t * d, d);
            let pe = self.p(self.layout.pos_emb + p * d, d);
            for (o, (a, b)) in x.row_mut(r).iter_mut().zip(te.iter().zip(pe)) {
                *o = a + b;
            }
        }
        x
    }

    /// One decoder block on `x`, appending its keys/values to `kv`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn block_forward(
        &self,
        block: usize,
        x: &Matrix,
        positions: &[usize],
        kv: &mut LayerKv,
        adapters: Option<&AdapterSet>,
        tally: &mut u64,
        tape: Option<&mut Option<BlockTape>>,
    ) -> Matrix {
        let (d, m) = (self.cfg.d_model, self.cfg.d_mlp);
        let o = &self.layout.blocks[block];
        let (h1, ln1) = layer_norm(x, self.p(o.ln1_g, d), self.p(o.ln1_b, d), tally);
        let mut q = linear(&h1, self.p(o.wq, d * d), self.p(o.bq, d), d, tally);
        let k = linear(&h1, self.p(o.wk, d * d), self.p(o.bk, d), d, tally);
        let mut v = linear(&h1, self.p(o.wv, d * d), self.p(o.bv, d), d, tally);
        let mut u_q = None;
        let mut u_v = None;
        if let Some(ad) = adapters.filter(|a| a.scale() != 0.0) {
            let r = ad.rank();
            u_q = Some(lora_add(
                &h1,
                ad.a(block, AdapterTarget::Query),
                ad.b(block, AdapterTarget::Query),
                r,
                ad.scale(),
                &mut q,
                tally,
            ));
            u_v = Some(lora_add(
                &h1,
                ad.a(block, AdapterTarget::Value),
                ad.b(block, AdapterTarget::Value),
                r,
                ad.scale(),
                &mut v,
                tally,
            ));
        }
        kv.push_rows(k.data(), v.data(), positions);
        let (att, probs) = attention(&q, positions, kv, self.cfg.heads, tally);
        let proj = linear(&att, self.p(o.wo, d * d), self.p(o.bo, d), d, tally);
        let mut x2 = x.clone();
        add_in_place(&mut x2, &proj, tally);
        let (h2, ln2) = layer_norm(&x2, self.p(o.ln2_g, d), self.p(o.ln2_b, d), tally);
        let a = linear(&h2, self.p(o.w1, d * m), self.p(o.b1, m), m, tally);
        let g = Matrix::from_vec_unchecked(a.rows(), m, a.data().iter().map(|&v| gelu(v)).collect());
        *tally += GELU_FLOPS * a.data().len() as u64;
        let mlp = linear(&g, self.p(o.w2, m * d), self.p(o.b2, d), d, tally);
        let mut out = x2.clone();
        add_in_place(&mut out, &mlp, tally);
        if let Some(slot) = tape {
            *slot = Some(BlockTape {
                input_rows: None,
                x: x.clone(),
                h1,
                ln1,
                q,
                k,
                v,
                u_q,
                u_v,
                probs,
                att,
                x2,
                h2,
                ln2,
                a,
                g,
            });
        }
        out
    }

    pub(crate) fn head_logits(&self, x: &Matrix) -> (Matrix, HeadTape) {
        let (d, v) = (self.cfg.d_model, self.cfg.vocab);
        let mut scratch = 0;
        let (h, stats) = layer_norm(x, self.p(self.layout.lnf_g, d), self.p(self.layout.lnf_b, d), &mut scratch);
        let zeros = vec![0.0; v];
        let logits = linear(&h, self.p(self.layout.w_out, d * v), &zeros, v, &mut scratch);
        (logits, HeadTape { x: x.clone(), h, stats })
    }

    /// Run blocks `from+1..=L` starting from `H_from`.
    #[allow(clippy::too_many_arguments)]
    fn run_blocks(
        &self,
        from: usize,
        mut x: Matrix,
        mut positions: Vec<usize>,
        modality: &[Modality],
        opts: RunOptions<'_>,
        cache: &mut KvCache,
        mut states: Option<&mut LayerStates>,
        mut tapes: Option<&mut Vec<BlockTape>>,
        flops: &mut Vec<u64>,
    ) -> Result<(Matrix, Vec<usize>)> {
        for layer in (from + 1)..=self.cfg.layers {
            let mut selected = None;
            if opts.cut.is_some_and(|c| layer > c) {
                let keep: Vec<usize> = positions
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| modality[p] == Modality::Text)
                    .map(|(r, _)| r)
                    .collect();
                if keep.is_empty() {
                    return Err(LabError::Protocol(
                        "truncation needs at least one text token".into(),
                    ));
                }
                if keep.len() < positions.len() {
                    x = x.select_rows(&keep);
                    positions = keep.iter().map(|&r| positions[r]).collect();
                    selected = Some(keep);
                }
            }
            let mut tally = 0;
            let mut tape = None;
            let block = layer - 1;
            x = self.block_forward(
                block,
                &x,
                &positions,
                &mut cache.layers[block],
                opts.adapters,
                &mut tally,
                tapes.as_ref().map(|_| &mut tape),
            );
            flops.push(tally);
            if let Some(t) = tapes.as_deref_mut() {
                let mut t_block = tape.expect("tape requested");
                t_block.input_rows = selected;
                t.push(t_block);
            }
            if let Some(s) = states.as_deref_mut() {
                s.hidden.push(x.clone());
                s.positions.push(positions.clone());
            }
        }
        Ok((x, positions))
    }

    fn prompt_pass(
        &self,
        seq: &TokenSequence,
        opts: RunOptions<'_>,
        tapes: Option<&mut Vec<BlockTape>>,
    ) -> Result<PromptPass> {
        if seq.is_empty() {
            return Err(LabError::Shape("empty token sequence".into()));
        }
        self.check_tokens(seq.tokens(), 0)?;
        self.check_cut(opts.cut)?;
        if let Some(ad) = opts.adapters {
            ad.check_compatible(self)?;
        }
        let positions: Vec<usize> = (0..seq.len()).collect();
        let h0 = self.embed(seq.tokens(), &positions);
        let mut states = LayerStates {
            hidden: vec![h0.clone()],
            positions: vec![positions.clone()],
            modality: seq.modality().to_vec(),
        };
        let mut cache = KvCache::new(self.cfg.layers, self.cfg.max_seq);
        let mut flops = Vec::with_capacity(self.cfg.layers);
        let (x, pos) = self.run_blocks(
            0,
            h0,
            positions,
            seq.modality(),
            opts,
            &mut cache,
            Some(&mut states),
            tapes,
            &mut flops,
        )?;
        cache.next_position = seq.len();
        Ok((x, pos, states, cache, flops))
    }

    /// Full forward returning logits for every position plus `H_0..H_L`.
    pub fn forward_capture(&self, seq: &TokenSequence) -> Result<(Matrix, LayerStates)> {
        let out = self.run(seq, RunOptions::default())?;
        Ok((out.logits, out.states))
    }

    /// Prompt pass with truncation and adapters. Logits cover every row of
    /// the final layer (text rows only when truncated).
    pub fn run(&self, seq: &TokenSequence, opts: RunOptions<'_>) -> Result<ForwardOutput> {
        let (x, _, states, cache, block_flops) = self.prompt_pass(seq, opts, None)?;
        let (logits, _) = self.head_logits(&x);
        Ok(ForwardOutput {
            logits,
            states,
            cache,
            block_flops,
        })
    }

    /// Prompt pass returning last-position logits and the cache.
    pub fn prefill(&self, seq: &TokenSequence, opts: RunOptions<'_>) -> Result<(PromptState, LayerStates)> {
        let (x, _, states, cache, _) = self.prompt_pass(seq, opts, None)?;
        let last = x.select_rows(&[x.rows() - 1]);
        let (logits, _) = self.head_logits(&last);
        Ok((
            PromptState {
                logits: logits.into_data(),
                cache,
            },
            states,
        ))
    }

    /// Forward pass that keeps every intermediate needed for backprop.
    pub(crate) fn train_pass(&self, seq: &TokenSequence, opts: RunOptions<'_>) -> Result<TrainRecord> {
        let mut tapes = Vec::with_capacity(self.cfg.layers);
        let (x, final_positions, _, _, _) = self.prompt_pass(seq, opts, Some(&mut tapes))?;
        let (logits, head) = self.head_logits(&x);
        Ok(TrainRecord {
            tapes,
            head,
            logits,
            final_positions,
        })
    }

    /// Continue from a hidden state at layer `from`, reusing `base` cache
    /// entries for blocks `1..=from` and recomputing blocks `from+1..=L`.
    pub fn resume(
        &self,
        hidden: Matrix,
        positions: Vec<usize>,
        modality: &[Modality],
        from: usize,
        base: &KvCache,
        opts: RunOptions<'_>,
    ) -> Result<PromptState> {
        if from > self.cfg.layers {
            return Err(LabError::Argument(format!("resume layer {from} exceeds depth")));
        }
        if hidden.rows() != positions.len() || hidden.rows() == 0 {
            return Err(LabError::Shape("hidden rows and positions disagree".into()));
        }
        self.check_cut(opts.cut)?;
        let mut cache = base.clone();
        for kv in &mut cache.layers[from..] {
            kv.clear();
        }
        let mut flops = Vec::new();
        let (x, _) = self.run_blocks(from, hidden, positions, modality, opts, &mut cache, None, None, &mut flops)?;
        let last = x.select_rows(&[x.rows() - 1]);
        let (logits, _) = self.head_logits(&last);
        Ok(PromptState {
            logits: logits.into_data(),
            cache,
        })
    }

    pub fn empty_cache(&self) -> KvCache {
        KvCache::new(self.cfg.layers, self.cfg.max_seq)
    }

    /// Feed one token at the next position and return next-token logits.
    pub fn forward_step(&self, token: usize, cache: &mut KvCache) -> Result<Vec<f64>> {
        self.forward_step_with(token, cache, None).map(|(l, _)| l)
    }

    /// [`Model::forward_step`] with optional adapters; also returns the
    /// per-block flop tally.
    pub fn forward_step_with(
        &self,
        token: usize,
        cache: &mut KvCache,
        adapters: Option<&AdapterSet>,
    ) -> Result<(Vec<f64>, Vec<u64>)> {
        let pos = cache.next_position;
        self.check_tokens(&[token], pos)?;
        if cache.layers.len() != self.cfg.layers {
            return Err(LabError::Protocol("cache built for a different depth".into()));
        }
        let mut x = self.embed(&[token], &[pos]);
        let mut flops = Vec::with_capacity(self.cfg.layers);
        for block in 0..self.cfg.layers {
            let mut tally = 0;
            x = self.block_forward(block, &x, &[pos], &mut cache.layers[block], adapters, &mut tally, None);
            flops.push(tally);
        }
        cache.next_position += 1;
        let (logits, _) = self.head_logits(&x);
        Ok((logits.into_data(), flops))
    }
}
