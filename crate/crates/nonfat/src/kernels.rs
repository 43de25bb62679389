//! Squared-exponential covariance functions and jittered Cholesky helpers.
//!
//! The first-level GPs use a product kernel over (embedding, frequency)
//! pairs: `κ((e, ω), (e', ω')) = κ_e(e, e') · κ_ω(ω, ω')` with independent
//! lengthscales. Lengthscales are stored on log scale so optimizer updates
//! keep them positive.

use crate::error::{Error, Result};
use crate::linalg;
use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

/// Squared-exponential kernel `k(x, x') = exp(-‖x - x'‖² / (2ℓ²))` with the
/// lengthscale kept as `log ℓ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SEKernel {
    pub log_lengthscale: f64,
}

impl SEKernel {
    pub fn new(log_lengthscale: f64) -> Self {
        SEKernel { log_lengthscale }
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    /// Kernel value for a pair of points.
    pub fn k(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
        assert_eq!(x.len(), y.len(), "kernel inputs differ in dimension");
        let ell2 = (2.0 * self.log_lengthscale).exp();
        let mut sq = 0.0;
        for (&a, &b) in x.iter().zip(y.iter()) {
            let d = a - b;
            sq += d * d;
        }
        (-0.5 * sq / ell2).exp()
    }

    /// Symmetric Gram matrix over the rows of `xs`. The diagonal is exactly
    /// 1 and `gram[i][j]` is stored identically to `gram[j][i]` (each pair is
    /// evaluated once and mirrored).
    pub fn gram(&self, xs: ArrayView2<f64>) -> Array2<f64> {
        let n = xs.nrows();
        let mut out = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            out[[i, i]] = 1.0;
            for j in 0..i {
                let v = self.k(xs.row(i), xs.row(j));
                out[[i, j]] = v;
                out[[j, i]] = v;
            }
        }
        out
    }

    /// Cross-covariance matrix: `out[i][j] = k(xs[i], ys[j])`.
    pub fn cross(&self, xs: ArrayView2<f64>, ys: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(
            xs.ncols(),
            ys.ncols(),
            "cross-covariance inputs differ in dimension"
        );
        let mut out = Array2::<f64>::zeros((xs.nrows(), ys.nrows()));
        for i in 0..xs.nrows() {
            for j in 0..ys.nrows() {
                out[[i, j]] = self.k(xs.row(i), ys.row(j));
            }
        }
        out
    }
}

/// Product kernel over concatenated (embedding, frequency) inputs: the first
/// `embed_dim` coordinates go through `embed_kernel`, the last coordinate
/// through `freq_kernel`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductKernel {
    pub embed_kernel: SEKernel,
    pub freq_kernel: SEKernel,
    pub embed_dim: usize,
}

impl ProductKernel {
    pub fn new(embed_kernel: SEKernel, freq_kernel: SEKernel, embed_dim: usize) -> Self {
        ProductKernel {
            embed_kernel,
            freq_kernel,
            embed_dim,
        }
    }

    /// Kernel value for a pair of `(embedding, frequency)` points, each of
    /// length `embed_dim + 1`.
    pub fn k(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
        assert_eq!(x.len(), self.embed_dim + 1, "point has wrong dimension");
        assert_eq!(y.len(), self.embed_dim + 1, "point has wrong dimension");
        let d = self.embed_dim;
        let ke = self
            .embed_kernel
            .k(x.slice(ndarray::s![..d]), y.slice(ndarray::s![..d]));
        let kw = self
            .freq_kernel
            .k(x.slice(ndarray::s![d..]), y.slice(ndarray::s![d..]));
        ke * kw
    }

    /// Symmetric Gram matrix over rows of `xs` (unit diagonal, mirrored).
    pub fn gram(&self, xs: ArrayView2<f64>) -> Array2<f64> {
        let n = xs.nrows();
        let mut out = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            out[[i, i]] = 1.0;
            for j in 0..i {
                let v = self.k(xs.row(i), xs.row(j));
                out[[i, j]] = v;
                out[[j, i]] = v;
            }
        }
        out
    }

    /// Cross-covariance matrix: `out[i][j] = k(xs[i], ys[j])`.
    pub fn cross(&self, xs: ArrayView2<f64>, ys: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((xs.nrows(), ys.nrows()));
        for i in 0..xs.nrows() {
            for j in 0..ys.nrows() {
                out[[i, j]] = self.k(xs.row(i), ys.row(j));
            }
        }
        out
    }
}

/// Cholesky factorization of `mat + jitter·I`, escalating the jitter by
/// factors of 10 (at most 6 attempts) until the factorization succeeds.
///
/// Returns the lower factor and the jitter that worked; fails if even the
/// largest jitter leaves the matrix indefinite.
pub fn chol_jitter(mat: &ArrayView2<f64>, base_jitter: f64) -> Result<(Array2<f64>, f64)> {
    assert_eq!(mat.nrows(), mat.ncols(), "chol_jitter needs a square matrix");
    assert!(
        base_jitter > 0.0 && base_jitter.is_finite(),
        "base jitter must be positive and finite"
    );
    let n = mat.nrows();
    let mut jitter = base_jitter;
    for _ in 0..6 {
        let mut shifted = mat.to_owned();
        for i in 0..n {
            shifted[[i, i]] += jitter;
        }
        if let Some(chol) = linalg::cholesky(&shifted.view()) {
            return Ok((chol, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "matrix stayed indefinite after jitter escalation to {:.3e}",
        jitter / 10.0
    )))
}
