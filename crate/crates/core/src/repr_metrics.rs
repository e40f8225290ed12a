//! Layer-wise representation geometry: matrix entropy and effective rank of
//! the trace-normalised Gram spectrum, TwoNN intrinsic dimension, and
//! trajectory curvature, each computed per modality.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{LayerStates, Modality};
use crate::numerics::{norm2, sym_eig, Matrix};
use crate::par::{map_indexed, Parallelism};

/// Eigenvalues are clamped to zero when they are negative by at most this
/// fraction of the largest eigenvalue.
const NEG_EIG_RTOL: f64 = 1e-10;
/// Displacements shorter than this are excluded from curvature means.
pub const MIN_DISPLACEMENT: f64 = 1e-12;
pub const MIN_DISTINCT_POINTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    /// Eigenvalues of the trace-normalised Gram matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// Von Neumann entropy in nats.
    pub entropy: f64,
    pub effective_rank: f64,
}

/// `ZᵀZ / tr` when `N > d`, otherwise `ZZᵀ / tr`.
pub fn gram_normalized(z: &Matrix) -> Result<Matrix> {
    if z.is_empty() {
        return Err(LabError::Degenerate("empty token matrix".into()));
    }
    let k = if z.rows() > z.cols() { z.gram_cols() } else { z.gram_rows() };
    let tr = k.trace();
    if !(tr > 0.0) || !tr.is_finite() {
        return Err(LabError::Degenerate(format!("Gram trace is {tr}")));
    }
    Ok(k.scaled(1.0 / tr))
}

/// Largest `s <= ln(m)` whose `exp` does not exceed `m`.
fn entropy_ceiling(m: usize) -> f64 {
    let mut hi = (m as f64).ln();
    while hi.exp() > m as f64 {
        hi = f64::from_bits(hi.to_bits() - 1);
    }
    hi
}

pub fn matrix_entropy(z: &Matrix) -> Result<SpectrumSummary> {
    let k = gram_normalized(z)?;
    let mut eig = sym_eig(&k)?.eigenvalues;
    let lmax = eig.first().copied().unwrap_or(0.0);
    for l in &mut eig {
        if *l < 0.0 {
            if *l < -NEG_EIG_RTOL * lmax {
                return Err(LabError::Degenerate(format!(
                    "Gram eigenvalue {l} is significantly negative"
                )));
            }
            *l = 0.0;
        }
    }
    let s: f64 = -eig.iter().filter(|&&l| l > 0.0).map(|&l| l * l.ln()).sum::<f64>();
    let entropy = s.clamp(0.0, entropy_ceiling(z.rows().min(z.cols())));
    Ok(SpectrumSummary {
        eigenvalues: eig,
        entropy,
        effective_rank: entropy.exp(),
    })
}

fn distinct_rows(z: &Matrix) -> usize {
    let mut rows: Vec<Vec<u64>> = z
        .row_iter()
        .map(|r| r.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

/// Distances from point `i` to its two nearest neighbours, ties broken by
/// lowest index.
fn two_nearest(z: &Matrix, i: usize) -> (f64, f64) {
    let xi = z.row(i);
    let mut best = [(f64::INFINITY, usize::MAX); 2];
    for j in 0..z.rows() {
        if j == i {
            continue;
        }
        let d2: f64 = xi.iter().zip(z.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < best[0].0 {
            best[1] = best[0];
            best[0] = (d2, j);
        } else if d2 < best[1].0 {
            best[1] = (d2, j);
        }
    }
    (best[0].0.sqrt(), best[1].0.sqrt())
}

/// TwoNN maximum-likelihood intrinsic dimension, `N' / Σ ln(r₂/r₁)` over
/// points with `r₁ > 0`.
pub fn intrinsic_dim(z: &Matrix) -> Result<f64> {
    intrinsic_dim_with(z, Parallelism::default())
}

pub fn intrinsic_dim_with(z: &Matrix, mode: Parallelism) -> Result<f64> {
    let distinct = distinct_rows(z);
    if distinct <= 1 {
        return Err(LabError::Degenerate(format!(
            "all {} points are identical",
            z.rows()
        )));
    }
    if distinct < MIN_DISTINCT_POINTS {
        return Err(LabError::SampleSize(format!(
            "{distinct} distinct points, need at least {MIN_DISTINCT_POINTS}"
        )));
    }
    let ratios = map_indexed(mode, z.rows(), |i| {
        let (r1, r2) = two_nearest(z, i);
        (r1 > 0.0).then(|| (r2 / r1).ln())
    });
    let (n, sum) = ratios
        .into_iter()
        .flatten()
        .fold((0usize, 0.0), |(n, s), l| (n + 1, s + l));
    if !(sum > 0.0) {
        return Err(LabError::Degenerate(
            "every point is equidistant from its two nearest neighbours".into(),
        ));
    }
    Ok(n as f64 / sum)
}

/// Angle between two non-zero vectors, `2·atan2(‖‖b‖a − ‖a‖b‖, ‖‖b‖a + ‖a‖b‖)`.
/// Equals `acos(⟨a,b⟩/(‖a‖‖b‖))` but keeps full precision near 0 and π.
pub fn angle_between(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (nb * x, na * y);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

/// Mean turning angle at each interior node of token trajectories.
///
/// `layers[l]` holds the tokens' states at layer `l` (same rows in every
/// layer). Returns `layers.len() − 2` values; entry `l − 1` compares the
/// displacements `z_l − z_{l−1}` and `z_{l+1} − z_l`. `None` marks a layer
/// where every token was excluded for a vanishing displacement.
pub fn curvature_series(layers: &[&Matrix]) -> Result<Vec<Option<f64>>> {
    if layers.len() < 3 {
        return Err(LabError::Shape(format!(
            "curvature needs at least 3 layers of states, got {}",
            layers.len()
        )));
    }
    let shape = layers[0].shape();
    if layers.iter().any(|m| m.shape() != shape) {
        return Err(LabError::Shape("token sets differ across layers".into()));
    }
    let (n, d) = shape;
    let disp: Vec<Vec<f64>> = layers
        .windows(2)
        .map(|w| {
            w[1].data()
                .iter()
                .zip(w[0].data())
                .map(|(b, a)| b - a)
                .collect()
        })
        .collect();
    Ok(disp
        .windows(2)
        .map(|w| {
            let (mut sum, mut count) = (0.0, 0usize);
            for i in 0..n {
                let (a, b) = (&w[0][i * d..(i + 1) * d], &w[1][i * d..(i + 1) * d]);
                let (na, nb) = (norm2(a), norm2(b));
                if na < MIN_DISPLACEMENT || nb < MIN_DISPLACEMENT {
                    continue;
                }
                sum += angle_between(a, b, na, nb);
                count += 1;
            }
            (count > 0).then(|| sum / count as f64)
        })
        .collect())
}

/// Per-layer mean curvature of the tokens of one modality, `L − 1` values.
pub fn trajectory_curvature(states: &LayerStates, m: Modality) -> Result<Vec<f64>> {
    let first = states.positions_for(0, m);
    if first.is_empty() {
        return Err(LabError::Degenerate(format!("no {} tokens", m.as_str())));
    }
    for l in 1..states.len() {
        if states.positions_for(l, m) != first {
            return Err(LabError::Protocol(format!(
                "{} token set changes at layer {l}",
                m.as_str()
            )));
        }
    }
    let mats: Vec<Matrix> = (0..states.len()).map(|l| states.modality_matrix(l, m)).collect();
    let refs: Vec<&Matrix> = mats.iter().collect();
    curvature_series(&refs)?
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            c.ok_or_else(|| {
                LabError::Degenerate(format!("every displacement vanishes around layer {}", i + 1))
            })
        })
        .collect()
}

/// Geometry series for one modality. Entropy, effective rank, ID and token
/// counts have one entry per captured layer; curvature has one entry per
/// interior layer. `None` marks an undefined value, explained in `flags`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryProfile {
    pub modality: Modality,
    pub entropy: Vec<Option<f64>>,
    pub eff_rank: Vec<Option<f64>>,
    pub intrinsic_dim: Vec<Option<f64>>,
    pub curvature: Vec<Option<f64>>,
    pub n_tokens: Vec<usize>,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl GeometryProfile {
    pub fn layers(&self) -> usize {
        self.entropy.len()
    }

    /// Curvature at captured layer `l`, defined for `1 <= l <= L − 1`.
    pub fn curvature_at(&self, l: usize) -> Option<f64> {
        if l == 0 {
            return None;
        }
        self.curvature.get(l - 1).copied().flatten()
    }
}

/// Profiles of both modalities; a modality absent from the input yields
/// `None` and a flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfilePair {
    pub image: Option<GeometryProfile>,
    pub text: Option<GeometryProfile>,
    pub flags: Vec<String>,
}

impl ProfilePair {
    pub fn get(&self, m: Modality) -> Option<&GeometryProfile> {
        match m {
            Modality::Image => self.image.as_ref(),
            Modality::Text => self.text.as_ref(),
        }
    }

    pub fn profiles(&self) -> impl Iterator<Item = &GeometryProfile> {
        self.image.iter().chain(self.text.iter())
    }
}

fn modality_profile(states: &LayerStates, m: Modality, mode: Parallelism) -> GeometryProfile {
    let layers = states.len();
    let mats: Vec<Matrix> = (0..layers).map(|l| states.modality_matrix(l, m)).collect();
    let mut flags = Vec::new();
    let per_layer = map_indexed(mode, layers, |l| {
        let z = &mats[l];
        if z.rows() == 0 {
            return (None, None, Some(format!("{}: no tokens at layer {l}", m.as_str())));
        }
        let ent = matrix_entropy(z).ok();
        match intrinsic_dim_with(z, Parallelism::Sequential) {
            Ok(id) => (ent, Some(id), None),
            Err(e) => (ent, None, Some(format!("{}: intrinsic_dim undefined at layer {l}: {e}", m.as_str()))),
        }
    });
    let mut entropy = Vec::with_capacity(layers);
    let mut eff_rank = Vec::with_capacity(layers);
    let mut ids = Vec::with_capacity(layers);
    for (ent, id, flag) in per_layer {
        eff_rank.push(ent.as_ref().map(|s: &SpectrumSummary| s.effective_rank));
        entropy.push(ent.map(|s| s.entropy));
        ids.push(id);
        flags.extend(flag);
    }
    let curvature = (1..layers.saturating_sub(1))
        .map(|l| {
            let p = states.positions_for(l, m);
            if p.is_empty() || states.positions_for(l - 1, m) != p || states.positions_for(l + 1, m) != p {
                flags.push(format!("{}: curvature undefined at layer {l}", m.as_str()));
                return None;
            }
            let c = curvature_series(&[&mats[l - 1], &mats[l], &mats[l + 1]])
                .ok()
                .and_then(|v| v[0]);
            if c.is_none() {
                flags.push(format!("{}: all displacements vanish at layer {l}", m.as_str()));
            }
            c
        })
        .collect();
    GeometryProfile {
        modality: m,
        entropy,
        eff_rank,
        intrinsic_dim: ids,
        curvature,
        n_tokens: mats.iter().map(Matrix::rows).collect(),
        flags,
    }
}

/// Entropy, effective rank, ID and curvature for each modality on its own
/// rows of every captured layer.
pub fn geometry_profile(states: &LayerStates) -> ProfilePair {
    geometry_profile_with(states, Parallelism::default())
}

pub fn geometry_profile_with(states: &LayerStates, mode: Parallelism) -> ProfilePair {
    let mut pair = ProfilePair {
        image: None,
        text: None,
        flags: Vec::new(),
    };
    for m in [Modality::Image, Modality::Text] {
        if states.modality.iter().all(|&x| x != m) {
            pair.flags.push(format!("{} modality absent", m.as_str()));
            continue;
        }
        let p = modality_profile(states, m, mode);
        match m {
            Modality::Image => pair.image = Some(p),
            Modality::Text => pair.text = Some(p),
        }
    }
    pair
}

fn csv_num(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |x| format!("{x}"))
}

pub const PROFILE_CSV_HEADER: &str = "layer,modality,entropy,eff_rank,intrinsic_dim,curvature,n_tokens";

/// One row per (modality, layer); undefined values are written as `NaN`.
pub fn profile_csv<'a>(profiles: impl IntoIterator<Item = &'a GeometryProfile>) -> String {
    let mut out = String::from(PROFILE_CSV_HEADER);
    out.push('\n');
    for p in profiles {
        for l in 0..p.layers() {
            let _ = writeln!(
                out,
                "{l},{},{},{},{},{},{}",
                p.modality.as_str(),
                csv_num(p.entropy[l]),
                csv_num(p.eff_rank[l]),
                csv_num(p.intrinsic_dim[l]),
                csv_num(p.curvature_at(l)),
                p.n_tokens[l]
            );
        }
    }
    out
}

/// Mean and population standard deviation of a per-layer series across
/// samples, ignoring undefined entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub mean: Vec<Option<f64>>,
    pub std: Vec<Option<f64>>,
    pub count: Vec<usize>,
}

fn series_stats<'a>(series: impl Iterator<Item = &'a [Option<f64>]>, len: usize) -> SeriesStats {
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); len];
    for s in series {
        for (c, v) in cols.iter_mut().zip(s) {
            c.extend(v);
        }
    }
    let mut stats = SeriesStats {
        mean: Vec::with_capacity(len),
        std: Vec::with_capacity(len),
        count: Vec::with_capacity(len),
    };
    for c in cols {
        stats.count.push(c.len());
        if c.is_empty() {
            stats.mean.push(None);
            stats.std.push(None);
            continue;
        }
        let n = c.len() as f64;
        let mean = c.iter().sum::<f64>() / n;
        let var = c.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        stats.mean.push(Some(mean));
        stats.std.push(Some(var.sqrt()));
    }
    stats
}

/// Per-sample profiles aggregated layer by layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileAggregate {
    pub modality: Modality,
    pub samples: usize,
    pub entropy: SeriesStats,
    pub eff_rank: SeriesStats,
    pub intrinsic_dim: SeriesStats,
    pub curvature: SeriesStats,
}

pub fn aggregate_profiles(profiles: &[&GeometryProfile]) -> Result<ProfileAggregate> {
    let first = profiles
        .first()
        .ok_or_else(|| LabError::Aggregation("no profiles to aggregate".into()))?;
    if profiles
        .iter()
        .any(|p| p.modality != first.modality || p.layers() != first.layers())
    {
        return Err(LabError::Aggregation(
            "profiles differ in modality or layer count".into(),
        ));
    }
    let (l, c) = (first.layers(), first.curvature.len());
    Ok(ProfileAggregate {
        modality: first.modality,
        samples: profiles.len(),
        entropy: series_stats(profiles.iter().map(|p| p.entropy.as_slice()), l),
        eff_rank: series_stats(profiles.iter().map(|p| p.eff_rank.as_slice()), l),
        intrinsic_dim: series_stats(profiles.iter().map(|p| p.intrinsic_dim.as_slice()), l),
        curvature: series_stats(profiles.iter().map(|p| p.curvature.as_slice()), c),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, seeded_gaussian, Rng};

    #[test]
    fn gram_branches() {
        let k = gram_normalized(&Matrix::identity(3)).unwrap();
        assert!(k.sub(&Matrix::identity(3).scaled(1.0 / 3.0)).unwrap().max_abs() < 1e-15);
        let mut rng = Rng::new(3);
        let tall = seeded_gaussian(&mut rng, 5, 2, 1.0).unwrap();
        let wide = seeded_gaussian(&mut rng, 2, 5, 1.0).unwrap();
        for z in [tall, wide] {
            let k = gram_normalized(&z).unwrap();
            assert_eq!(k.shape(), (2, 2));
            assert!((k.trace() - 1.0).abs() <= 1e-12);
        }
        assert!(matches!(gram_normalized(&Matrix::zeros(3, 2)), Err(LabError::Degenerate(_))));
    }

    #[test]
    fn entropy_extremes() {
        let z = Matrix::from_rows(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]).unwrap();
        let s = matrix_entropy(&z).unwrap();
        assert!(s.entropy.abs() <= 1e-12);
        assert_eq!(s.effective_rank, s.entropy.exp());
        let z = Matrix::identity(3).pad_cols(5);
        let s = matrix_entropy(&z).unwrap();
        assert!((s.entropy - 3f64.ln()).abs() < 1e-12);
        assert!(s.effective_rank <= 3.0 && s.effective_rank >= 1.0);
    }

    #[test]
    fn entropy_scale_invariant() {
        let mut rng = Rng::new(5);
        let z = seeded_gaussian(&mut rng, 8, 4, 1.0).unwrap();
        let a = matrix_entropy(&z).unwrap().entropy;
        let b = matrix_entropy(&z.scaled(-37.5)).unwrap().entropy;
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn id_degenerate_and_small() {
        let z = Matrix::from_rows(&vec![[1.0, 2.0]; 50]).unwrap();
        assert!(matches!(intrinsic_dim(&z), Err(LabError::Degenerate(_))));
        let mut rng = Rng::new(1);
        let z = seeded_gaussian(&mut rng, 9, 3, 1.0).unwrap();
        assert!(matches!(intrinsic_dim(&z), Err(LabError::SampleSize(_))));
    }

    #[test]
    fn id_modes_agree() {
        let mut rng = Rng::new(2);
        let z = seeded_gaussian(&mut rng, 60, 3, 1.0).unwrap();
        let a = intrinsic_dim_with(&z, Parallelism::Sequential).unwrap();
        let b = intrinsic_dim_with(&z, Parallelism::Rayon).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn curvature_identities() {
        let straight: Vec<Matrix> = (0..5)
            .map(|l| Matrix::from_rows(&[[l as f64, 2.0 * l as f64], [1.0 - l as f64, 0.5]]).unwrap())
            .collect();
        let refs: Vec<&Matrix> = straight.iter().collect();
        for c in curvature_series(&refs).unwrap() {
            assert!(c.unwrap().abs() < 1e-9);
        }
        let mut p = [0.0, 0.0];
        let zig: Vec<Matrix> = (0..6)
            .map(|l| {
                if l > 0 {
                    p[(l - 1) % 2] += 1.0;
                }
                Matrix::from_rows(&[p]).unwrap()
            })
            .collect();
        let refs: Vec<&Matrix> = zig.iter().collect();
        let c = curvature_series(&refs).unwrap();
        assert_eq!(c.len(), 4);
        for v in c {
            assert!((v.unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-9);
        }
    }

    #[test]
    fn stationary_tokens_excluded() {
        let layers: Vec<Matrix> = (0..3)
            .map(|l| Matrix::from_rows(&[[0.0, 0.0], [l as f64, (l * l) as f64]]).unwrap())
            .collect();
        let refs: Vec<&Matrix> = layers.iter().collect();
        let c = curvature_series(&refs).unwrap()[0].unwrap();
        let expected = (dot(&[1.0, 1.0], &[1.0, 3.0]) / (2f64.sqrt() * 10f64.sqrt())).acos();
        assert!((c - expected).abs() < 1e-15);
        let still = vec![Matrix::zeros(2, 2); 3];
        let refs: Vec<&Matrix> = still.iter().collect();
        assert_eq!(curvature_series(&refs).unwrap(), vec![None]);
    }

    #[test]
    fn aggregation() {
        let p = |v: f64| GeometryProfile {
            modality: Modality::Text,
            entropy: vec![Some(v), None],
            eff_rank: vec![Some(v.exp()), None],
            intrinsic_dim: vec![Some(v), Some(1.0)],
            curvature: vec![],
            n_tokens: vec![3, 3],
            flags: vec![],
        };
        let (a, b) = (p(1.0), p(3.0));
        let agg = aggregate_profiles(&[&a, &b]).unwrap();
        assert_eq!(agg.entropy.mean, vec![Some(2.0), None]);
        assert_eq!(agg.entropy.std, vec![Some(1.0), None]);
        assert!(aggregate_profiles(&[]).is_err());
    }
}
