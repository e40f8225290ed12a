//! Reference implementations used only by tests. Each one recomputes a
//! quantity by a different route than the library: extended precision,
//! closed forms, brute force or naive enumeration.
#![allow(dead_code)]

use std::collections::HashMap;

/// Double-double number `hi + lo` with `|lo| <= ulp(hi)/2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn norm(hi: f64, lo: f64) -> Self {
        let (h, l) = two_sum(hi, lo);
        Dd { hi: h, lo: l }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        Dd::norm(s, e + self.lo + o.lo)
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        Dd::norm(p, e + self.hi * o.lo + self.lo * o.hi)
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::new(q1)));
        let q2 = r.hi / o.hi;
        let r2 = r.sub(o.mul(Dd::new(q2)));
        Dd::norm(q1, q2).add(Dd::new(r2.hi / o.hi))
    }

    pub fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::default();
        }
        let x = self.hi.sqrt();
        let (p, e) = two_prod(x, x);
        let r = self.sub(Dd { hi: p, lo: e });
        Dd::norm(x, r.hi / (2.0 * x))
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

pub fn dd_dot(a: &[Dd], b: &[Dd]) -> Dd {
    a.iter().zip(b).fold(Dd::default(), |s, (x, y)| s.add(x.mul(*y)))
}

/// Angle from the exact (double-double) Gram identities
/// `sin² = (‖a‖²‖b‖² − ⟨a,b⟩²)/(‖a‖²‖b‖²)`.
pub fn dd_angle(a: &[Dd], b: &[Dd]) -> f64 {
    let (aa, bb, ab) = (dd_dot(a, a), dd_dot(b, b), dd_dot(a, b));
    let cross2 = aa.mul(bb).sub(ab.mul(ab));
    let cross = if cross2.hi > 0.0 { cross2.sqrt() } else { Dd::default() };
    cross.to_f64().atan2(ab.to_f64())
}

/// Mean turning angle per interior layer, with exact displacements.
/// `layers[l]` is row-major `[n × d]`.
pub fn curvature(layers: &[Vec<f64>], n: usize, d: usize, min_disp: f64) -> Vec<Option<f64>> {
    let disp: Vec<Vec<Dd>> = layers
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| Dd::new(*b).sub(Dd::new(*a))).collect())
        .collect();
    disp.windows(2)
        .map(|w| {
            let mut sum = Dd::default();
            let mut count = 0;
            for i in 0..n {
                let (a, b) = (&w[0][i * d..(i + 1) * d], &w[1][i * d..(i + 1) * d]);
                if dd_dot(a, a).sqrt().to_f64() < min_disp || dd_dot(b, b).sqrt().to_f64() < min_disp {
                    continue;
                }
                sum = sum.add(Dd::new(dd_angle(a, b)));
                count += 1;
            }
            (count > 0).then(|| sum.div(Dd::new(count as f64)).to_f64())
        })
        .collect()
}

/// Eigenvalues of a symmetric 3×3 matrix from the trigonometric solution
/// of its characteristic polynomial, descending.
pub fn sym3_eigenvalues(m: [[f64; 3]; 3]) -> [f64; 3] {
    let p1 = m[0][1].powi(2) + m[0][2].powi(2) + m[1][2].powi(2);
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    if p1 == 0.0 {
        let mut e = [m[0][0], m[1][1], m[2][2]];
        e.sort_by(|a, b| b.total_cmp(a));
        return e;
    }
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..3).map(|j| (m[i][j] - if i == j { q } else { 0.0 }) / p).collect())
        .collect();
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

/// Von Neumann entropy of an `n × 3` matrix through its 3×3 Gram spectrum.
pub fn entropy_n_by_3(rows: &[[f64; 3]]) -> f64 {
    let mut g = [[0.0; 3]; 3];
    for r in rows {
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] += r[i] * r[j];
            }
        }
    }
    let tr = g[0][0] + g[1][1] + g[2][2];
    sym3_eigenvalues(g)
        .iter()
        .map(|&l| l / tr)
        .filter(|&l| l > 0.0)
        .map(|l| -l * l.ln())
        .sum()
}

/// TwoNN by sorting every distance list; the sum of log ratios is kept in
/// double-double.
pub fn twonn(points: &[Vec<f64>]) -> f64 {
    let mut sum = Dd::default();
    let mut used = 0usize;
    for (i, p) in points.iter().enumerate() {
        let mut d: Vec<f64> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, q)| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect();
        d.sort_by(f64::total_cmp);
        if d[0] > 0.0 {
            sum = sum.add(Dd::new((d[1] / d[0]).ln()));
            used += 1;
        }
    }
    used as f64 / sum.to_f64()
}

/// Lowercase words with one trailing period removed from the whole text.
fn words(s: &str) -> Vec<String> {
    let lower = s.to_lowercase();
    let t = lower.trim_end();
    let t = t.strip_suffix('.').unwrap_or(t);
    t.split_whitespace().map(str::to_string).collect()
}

fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

/// Clipped n-gram matches by removing each matched reference gram once.
fn clipped(c: &[String], r: &[String], n: usize) -> usize {
    let mut pool = grams(r, n);
    let mut hits = 0;
    for g in grams(c, n) {
        if let Some(k) = pool.iter().position(|x| *x == g) {
            pool.swap_remove(k);
            hits += 1;
        }
    }
    hits
}

/// BLEU as documented: orders `1..=min(4, c)`, zero unigram overlap gives 0,
/// the k-th zero precision becomes `1/(2^k c)`.
pub fn bleu(cand: &str, refr: &str) -> f64 {
    let (c, r) = (words(cand), words(refr));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let order = c.len().min(4);
    let mut prod = 1.0;
    let mut k = 0;
    for n in 1..=order {
        let m = clipped(&c, &r, n);
        let p = if m > 0 {
            m as f64 / (c.len() + 1 - n) as f64
        } else if n == 1 {
            return 0.0;
        } else {
            k += 1;
            1.0 / (2f64.powi(k) * c.len() as f64)
        };
        prod *= p;
    }
    let bp = if c.len() < r.len() { (1.0 - r.len() as f64 / c.len() as f64).exp() } else { 1.0 };
    bp * prod.powf(1.0 / order as f64)
}

pub fn rouge_n(cand: &str, refr: &str, n: usize) -> f64 {
    let (c, r) = (words(cand), words(refr));
    let (gc, gr) = (grams(&c, n).len(), grams(&r, n).len());
    if gc == 0 || gr == 0 {
        return f64::from(u8::from(c == r));
    }
    let m = clipped(&c, &r, n) as f64;
    if m == 0.0 {
        return 0.0;
    }
    2.0 * m / (gc + gr) as f64
}

/// ROUGE-L F1 with the LCS found by exhaustive memoised recursion.
pub fn rouge_l(cand: &str, refr: &str) -> f64 {
    let (c, r) = (words(cand), words(refr));
    if c.is_empty() || r.is_empty() {
        return f64::from(u8::from(c == r));
    }
    fn lcs(c: &[String], r: &[String], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if c.is_empty() || r.is_empty() {
            return 0;
        }
        if let Some(&v) = memo.get(&(c.len(), r.len())) {
            return v;
        }
        let v = if c[0] == r[0] {
            1 + lcs(&c[1..], &r[1..], memo)
        } else {
            lcs(&c[1..], r, memo).max(lcs(c, &r[1..], memo))
        };
        memo.insert((c.len(), r.len()), v);
        v
    }
    let l = lcs(&c, &r, &mut HashMap::new()) as f64;
    if l == 0.0 {
        return 0.0;
    }
    2.0 * l / (c.len() + r.len()) as f64
}

/// Expected per-layer row counts and block cache lengths of a pass with
/// `n_img` image tokens followed by `n_txt` text tokens, cut at `cut`.
pub fn truncation_shapes(layers: usize, n_img: usize, n_txt: usize, cut: usize) -> (Vec<usize>, Vec<Vec<usize>>, Vec<usize>) {
    let n = n_img + n_txt;
    let rows: Vec<usize> = (0..=layers).map(|l| if l <= cut { n } else { n_txt }).collect();
    let pos = rows
        .iter()
        .map(|&r| if r == n { (0..n).collect() } else { (n_img..n).collect() })
        .collect();
    let cache = (1..=layers).map(|b| if b <= cut { n } else { n_txt }).collect();
    (rows, pos, cache)
}

/// Population coefficient of variation, straight from the definition.
pub fn cv(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt() / mu
}
