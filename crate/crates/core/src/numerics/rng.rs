//! SplitMix64 generator with Box–Muller normals.
//!
//! The stream is a pure function of the 64-bit seed, using only integer
//! arithmetic and IEEE-754 `ln`/`sqrt`/`cos`, so it is reproducible across
//! platforms. Golden values in the tests freeze the algorithm.

use super::matrix::Matrix;
use crate::error::{LabError, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    state: u64,
    spare_normal: Option<f64>,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            state: seed,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child generator for worker `stream`.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(derive_seed(self.seed, stream))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (`n > 0`).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; bias is below 2^-64 · n, irrelevant here.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Deterministic child seed for `(parent, stream)`.
pub fn derive_seed(parent: u64, stream: u64) -> u64 {
    mix64(parent ^ mix64(stream.wrapping_add(GOLDEN_GAMMA)))
}

/// `rows × cols` matrix of N(0, scale²) draws.
pub fn seeded_gaussian(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(LabError::Shape(format!(
            "gaussian matrix needs non-zero dimensions, got {rows}x{cols}"
        )));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(LabError::Argument(format!("scale must be positive, got {scale}")));
    }
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Ok(Matrix::from_vec_unchecked(rows, cols, data))
}
