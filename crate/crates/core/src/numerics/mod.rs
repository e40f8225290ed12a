//! Dense linear algebra, the symmetric eigensolver, softmax and the seeded
//! generator shared by the rest of the crate.

mod eig;
mod matrix;
mod rng;

pub use eig::{sym_eig, sym_eigh, EigenDecomposition, Spectrum};
pub use matrix::{dot, norm2, Matrix};
pub use rng::{derive_seed, seeded_gaussian, Rng};

use crate::error::{LabError, Result};

/// Numerically stable softmax of a finite vector.
pub fn stable_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(LabError::Shape("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(LabError::Shape("softmax input must be finite".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place softmax that tolerates `-inf` entries (masked positions). At
/// least one entry must be finite.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// `log softmax`, finite entries only where the input is finite.
pub(crate) fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_basic_cases() {
        assert_eq!(stable_softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(stable_softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(stable_softmax(&[]), Err(LabError::Shape(_))));
        assert!(stable_softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn masked_entries_get_zero_mass() {
        let mut v = vec![1.0, f64::NEG_INFINITY, 1.0];
        softmax_in_place(&mut v);
        assert_eq!(v, vec![0.5, 0.0, 0.5]);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in proptest::collection::vec(-50.0f64..50.0, 1..40),
            c in -1000.0f64..1000.0,
        ) {
            let p = stable_softmax(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = stable_softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
