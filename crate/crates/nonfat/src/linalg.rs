//! Small dense linear-algebra kernels shared by the kernel, Gaussian and
//! autodiff modules: Cholesky factorization and triangular solves.
//!
//! Matrices here are at most a few hundred rows (pseudo-input counts and
//! quadrature orders), so straightforward loops are fast enough and keep
//! the reduction order fixed for reproducibility.

use ndarray::{Array2, ArrayView2};

/// Cholesky factorization `M = L Lᵀ` of a symmetric positive-definite matrix.
///
/// Returns `None` if a pivot is non-positive (matrix not positive definite
/// within round-off). Only the lower triangle of `m` is read.
pub(crate) fn cholesky(m: &ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "cholesky: matrix must be square");
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Solves `L X = B` by forward substitution, `L` lower triangular.
pub(crate) fn solve_lower(l: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    assert_eq!(n, l.ncols(), "solve_lower: L must be square");
    assert_eq!(n, b.nrows(), "solve_lower: dimension mismatch");
    let mut x = b.to_owned();
    let ncols = b.ncols();
    for c in 0..ncols {
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}

/// Solves `Lᵀ X = B` by back substitution, `L` lower triangular.
pub(crate) fn solve_lower_t(l: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    assert_eq!(n, l.ncols(), "solve_lower_t: L must be square");
    assert_eq!(n, b.nrows(), "solve_lower_t: dimension mismatch");
    let mut x = b.to_owned();
    let ncols = b.ncols();
    for c in 0..ncols {
        for i in (0..n).rev() {
            let mut s = x[[i, c]];
            for k in i + 1..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}

/// Log-determinant of `M = L Lᵀ` given its Cholesky factor.
pub(crate) fn logdet_from_chol(l: &ArrayView2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>()
}
