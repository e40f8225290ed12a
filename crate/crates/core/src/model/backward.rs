//! Hand-written reverse pass for the toy architecture.
//!
//! Only prompt passes without a prior cache are differentiated, so every
//! block's keys are exactly its own rows. Gradients can be requested for the
//! base parameters, for adapter factors, or both.

use super::forward::{gelu_grad, TrainRecord};
use super::Model;
use crate::distill::{AdapterSet, AdapterTarget};
use crate::numerics::Matrix;

/// Intermediates of one block saved by the forward pass.
#[derive(Clone, Debug)]
pub(crate) struct BlockTape {
    /// Rows kept from the previous layer (truncation) and that layer's
    /// row count.
    pub input_rows: Option<Vec<usize>>,
    pub x: Matrix,
    pub h1: Matrix,
    pub ln1: Vec<(f64, f64)>,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub u_q: Option<Matrix>,
    pub u_v: Option<Matrix>,
    pub probs: Vec<Matrix>,
    pub att: Matrix,
    pub x2: Matrix,
    pub h2: Matrix,
    pub ln2: Vec<(f64, f64)>,
    pub a: Matrix,
    pub g: Matrix,
}

#[derive(Clone, Debug)]
pub(crate) struct HeadTape {
    pub x: Matrix,
    pub h: Matrix,
    pub stats: Vec<(f64, f64)>,
}

/// `dW += xᵀ·dy`, `db += Σ dy`; returns `dy·Wᵀ`.
fn linear_backward(
    x: &Matrix,
    w: &[f64],
    dy: &Matrix,
    grads: Option<(&mut [f64], Option<&mut [f64]>)>,
) -> Matrix {
    let (d_in, d_out) = (x.cols(), dy.cols());
    if let Some((dw, db)) = grads {
        for r in 0..x.rows() {
            let xr = x.row(r);
            let dyr = dy.row(r);
            for (i, &xi) in xr.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let dwi = &mut dw[i * d_out..(i + 1) * d_out];
                for (g, &d) in dwi.iter_mut().zip(dyr) {
                    *g += xi * d;
                }
            }
        }
        if let Some(db) = db {
            for r in 0..dy.rows() {
                for (g, &d) in db.iter_mut().zip(dy.row(r)) {
                    *g += d;
                }
            }
        }
    }
    let mut dx = Matrix::zeros(x.rows(), d_in);
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let dxr = dx.row_mut(r);
        for (i, o) in dxr.iter_mut().enumerate() {
            *o = crate::numerics::dot(dyr, &w[i * d_out..(i + 1) * d_out]);
        }
    }
    dx
}

fn layer_norm_backward(
    x: &Matrix,
    stats: &[(f64, f64)],
    g: &[f64],
    dy: &Matrix,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Matrix {
    let d = x.cols();
    let mut dx = Matrix::zeros(x.rows(), d);
    let mut grads = grads;
    for r in 0..x.rows() {
        let (mean, rstd) = stats[r];
        let xr = x.row(r);
        let dyr = dy.row(r);
        let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * rstd).collect();
        let dxhat: Vec<f64> = dyr.iter().zip(g).map(|(a, b)| a * b).collect();
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rstd * (dxhat[j] - m1 - xhat[j] * m2);
        }
        if let Some((dg, db)) = grads.as_mut() {
            for j in 0..d {
                dg[j] += dyr[j] * xhat[j];
                db[j] += dyr[j];
            }
        }
    }
    dx
}

fn add_assign(a: &mut Matrix, b: &Matrix) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

/// Backward through `y += scale · (x·Aᵀ)·Bᵀ`; accumulates factor gradients
/// and adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn lora_backward(
    x: &Matrix,
    u: &Matrix,
    a: &[f64],
    b: &[f64],
    rank: usize,
    scale: f64,
    dy: &Matrix,
    dx: &mut Matrix,
    grads: Option<(&mut [f64], &mut [f64])>,
) {
    let (d_in, d_out) = (x.cols(), dy.cols());
    let mut du = Matrix::zeros(x.rows(), rank);
    for r in 0..x.rows() {
        let dyr = dy.row(r);
        for k in 0..rank {
            let mut acc = 0.0;
            for j in 0..d_out {
                acc += dyr[j] * b[j * rank + k];
            }
            du.set(r, k, scale * acc);
        }
    }
    if let Some((da, db)) = grads {
        for r in 0..x.rows() {
            let dyr = dy.row(r);
            let ur = u.row(r);
            for j in 0..d_out {
                let s = scale * dyr[j];
                for k in 0..rank {
                    db[j * rank + k] += s * ur[k];
                }
            }
            let xr = x.row(r);
            for k in 0..rank {
                let duk = du.get(r, k);
                for i in 0..d_in {
                    da[k * d_in + i] += duk * xr[i];
                }
            }
        }
    }
    for r in 0..x.rows() {
        for k in 0..rank {
            let duk = du.get(r, k);
            if duk == 0.0 {
                continue;
            }
            let ak = &a[k * d_in..(k + 1) * d_in];
            for (o, &aki) in dx.row_mut(r).iter_mut().zip(ak) {
                *o += duk * aki;
            }
        }
    }
}

fn split2(buf: &mut [f64], a: usize, alen: usize, b: usize, blen: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + alen <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + alen], &mut hi[..blen])
}

impl Model {
    fn block_backward(
        &self,
        block: usize,
        t: &BlockTape,
        dout: &Matrix,
        adapters: Option<&AdapterSet>,
        mut pg: Option<&mut [f64]>,
        mut ag: Option<&mut [f64]>,
    ) -> Matrix {
        let (d, m, heads) = (self.cfg.d_model, self.cfg.d_mlp, self.cfg.heads);
        let dh = d / heads;
        let o = &self.layout.blocks[block];

        // MLP branch
        let dx2_res = dout.clone();
        let dg = linear_backward(
            &t.g,
            self.p(o.w2, m * d),
            dout,
            pg.as_deref_mut().map(|g| {
                let (w, b) = split2(g, o.w2, m * d, o.b2, d);
                (w, Some(b))
            }),
        );
        let mut da = dg;
        for (v, &a) in da.data_mut().iter_mut().zip(t.a.data()) {
            *v *= gelu_grad(a);
        }
        let dh2 = linear_backward(
            &t.h2,
            self.p(o.w1, d * m),
            &da,
            pg.as_deref_mut().map(|g| {
                let (w, b) = split2(g, o.w1, d * m, o.b1, m);
                (w, Some(b))
            }),
        );
        let mut dx2 = layer_norm_backward(
            &t.x2,
            &t.ln2,
            self.p(o.ln2_g, d),
            &dh2,
            pg.as_deref_mut().map(|g| split2(g, o.ln2_g, d, o.ln2_b, d)),
        );
        add_assign(&mut dx2, &dx2_res);

        // attention branch
        let datt = linear_backward(
            &t.att,
            self.p(o.wo, d * d),
            &dx2,
            pg.as_deref_mut().map(|g| {
                let (w, b) = split2(g, o.wo, d * d, o.bo, d);
                (w, Some(b))
            }),
        );
        let n = t.q.rows();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for (h, p) in t.probs.iter().enumerate() {
            let off = h * dh;
            for i in 0..n {
                let doi = &datt.row(i)[off..off + dh];
                let pi = p.row(i);
                let mut dp = vec![0.0; n];
                for j in 0..n {
                    if pi[j] == 0.0 {
                        continue;
                    }
                    dp[j] = crate::numerics::dot(doi, &t.v.row(j)[off..off + dh]);
                    let dvj = &mut dv.row_mut(j)[off..off + dh];
                    for (g, &x) in dvj.iter_mut().zip(doi) {
                        *g += pi[j] * x;
                    }
                }
                let inner: f64 = pi.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    if pi[j] == 0.0 {
                        continue;
                    }
                    let ds = pi[j] * (dp[j] - inner) * scale;
                    let kj = &t.k.row(j)[off..off + dh];
                    let qi = &t.q.row(i)[off..off + dh];
                    let dqi = &mut dq.row_mut(i)[off..off + dh];
                    for (g, &x) in dqi.iter_mut().zip(kj) {
                        *g += ds * x;
                    }
                    let dkj = &mut dk.row_mut(j)[off..off + dh];
                    for (g, &x) in dkj.iter_mut().zip(qi) {
                        *g += ds * x;
                    }
                }
            }
        }

        let mut dh1 = linear_backward(
            &t.h1,
            self.p(o.wq, d * d),
            &dq,
            pg.as_deref_mut().map(|g| {
                let (w, b) = split2(g, o.wq, d * d, o.bq, d);
                (w, Some(b))
            }),
        );
        add_assign(
            &mut dh1,
            &linear_backward(
                &t.h1,
                self.p(o.wk, d * d),
                &dk,
                pg.as_deref_mut().map(|g| {
                    let (w, b) = split2(g, o.wk, d * d, o.bk, d);
                    (w, Some(b))
                }),
            ),
        );
        add_assign(
            &mut dh1,
            &linear_backward(
                &t.h1,
                self.p(o.wv, d * d),
                &dv,
                pg.as_deref_mut().map(|g| {
                    let (w, b) = split2(g, o.wv, d * d, o.bv, d);
                    (w, Some(b))
                }),
            ),
        );
        if let Some(ad) = adapters.filter(|a| a.scale() != 0.0) {
            let r = ad.rank();
            for (target, u, dy) in [
                (AdapterTarget::Query, t.u_q.as_ref(), &dq),
                (AdapterTarget::Value, t.u_v.as_ref(), &dv),
            ] {
                let u = u.expect("adapter intermediates recorded");
                let grads = ag.as_deref_mut().map(|g| {
                    let (ao, alen) = ad.a_range(block, target);
                    let (bo, blen) = ad.b_range(block, target);
                    split2(g, ao, alen, bo, blen)
                });
                lora_backward(
                    &t.h1,
                    u,
                    ad.a(block, target),
                    ad.b(block, target),
                    r,
                    ad.scale(),
                    dy,
                    &mut dh1,
                    grads,
                );
            }
        }
        let mut dx = layer_norm_backward(
            &t.x,
            &t.ln1,
            self.p(o.ln1_g, d),
            &dh1,
            pg.map(|g| split2(g, o.ln1_g, d, o.ln1_b, d)),
        );
        add_assign(&mut dx, &dx2);
        dx
    }

    /// Backpropagate `dlogits` (one row per final-layer row) through the
    /// recorded pass.
    pub(crate) fn backward(
        &self,
        rec: &TrainRecord,
        tokens: &[usize],
        dlogits: &Matrix,
        adapters: Option<&AdapterSet>,
        mut param_grads: Option<&mut [f64]>,
        mut adapter_grads: Option<&mut [f64]>,
    ) {
        let (d, v) = (self.cfg.d_model, self.cfg.vocab);
        let l = &self.layout;
        let dhead = linear_backward(
            &rec.head.h,
            self.p(l.w_out, d * v),
            dlogits,
            param_grads.as_deref_mut().map(|g| (&mut g[l.w_out..l.w_out + d * v], None)),
        );
        let mut dx = layer_norm_backward(
            &rec.head.x,
            &rec.head.stats,
            self.p(l.lnf_g, d),
            &dhead,
            param_grads.as_deref_mut().map(|g| split2(g, l.lnf_g, d, l.lnf_b, d)),
        );
        for (block, tape) in rec.tapes.iter().enumerate().rev() {
            let din = self.block_backward(
                block,
                tape,
                &dx,
                adapters,
                param_grads.as_deref_mut(),
                adapter_grads.as_deref_mut(),
            );
            dx = match &tape.input_rows {
                Some(keep) => {
                    let prev_rows = if block == 0 {
                        tokens.len()
                    } else {
                        rec.tapes[block - 1].x.rows()
                    };
                    let mut full = Matrix::zeros(prev_rows, d);
                    for (r, &src) in keep.iter().enumerate() {
                        full.row_mut(src).copy_from_slice(din.row(r));
                    }
                    full
                }
                None => din,
            };
        }
        if let Some(g) = param_grads {
            for (r, &t) in tokens.iter().enumerate() {
                let row = dx.row(r);
                for (dst, &s) in g[l.tok_emb + t * d..l.tok_emb + (t + 1) * d].iter_mut().zip(row) {
                    *dst += s;
                }
                for (dst, &s) in g[l.pos_emb + r * d..l.pos_emb + (r + 1) * d].iter_mut().zip(row) {
                    *dst += s;
                }
            }
        }
    }
}
