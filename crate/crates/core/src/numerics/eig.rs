//! Cyclic Jacobi eigensolver for real symmetric matrices.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{LabError, Result};

const SYMMETRY_RTOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Eigenvalues sorted in descending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
}

impl Spectrum {
    pub fn sum(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

/// Eigenvalues with matching eigenvectors stored as the columns of `vectors`.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub spectrum: Spectrum,
    pub vectors: Matrix,
}

impl EigenDecomposition {
    /// `‖m − VΛVᵀ‖_F / ‖m‖_F`.
    pub fn relative_residual(&self, m: &Matrix) -> f64 {
        let n = m.rows();
        let mut recon = Matrix::zeros(n, n);
        for (k, &lam) in self.spectrum.eigenvalues.iter().enumerate() {
            for i in 0..n {
                let vik = self.vectors.get(i, k) * lam;
                for j in 0..n {
                    let cur = recon.get(i, j);
                    recon.set(i, j, cur + vik * self.vectors.get(j, k));
                }
            }
        }
        let denom = m.frobenius_norm();
        let num = m.sub(&recon).map(|d| d.frobenius_norm()).unwrap_or(f64::INFINITY);
        if denom == 0.0 {
            num
        } else {
            num / denom
        }
    }
}

fn check_symmetric(m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(LabError::Shape(format!(
            "eigensolver needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let scale = m.max_abs();
    let n = m.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m.get(i, j) - m.get(j, i)).abs() > SYMMETRY_RTOL * scale {
                return Err(LabError::Shape(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// All eigenvalues of a symmetric matrix, descending.
pub fn sym_eig(m: &Matrix) -> Result<Spectrum> {
    Ok(jacobi(m, false)?.spectrum)
}

/// Eigenvalues and eigenvectors of a symmetric matrix.
pub fn sym_eigh(m: &Matrix) -> Result<EigenDecomposition> {
    jacobi(m, true)
}

fn jacobi(m: &Matrix, want_vectors: bool) -> Result<EigenDecomposition> {
    check_symmetric(m)?;
    let n = m.rows();
    // Work on the symmetrised copy so tiny asymmetries cannot drift.
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (m.get(i, j) + m.get(j, i));
        }
    }
    let mut v = if want_vectors {
        Matrix::identity(n).into_data()
    } else {
        Vec::new()
    };

    let total: f64 = a.iter().map(|x| x * x).sum();
    let tol = f64::EPSILON * f64::EPSILON * total;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        if off <= tol || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                if want_vectors {
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = if want_vectors {
        let mut out = Matrix::zeros(n, n);
        for (new_col, &old_col) in order.iter().enumerate() {
            for r in 0..n {
                out.set(r, new_col, v[r * n + old_col]);
            }
        }
        out
    } else {
        Matrix::zeros(0, 0)
    };
    Ok(EigenDecomposition {
        spectrum: Spectrum { eigenvalues },
        vectors,
    })
}
