//! Gauss-Laguerre quadrature and inverse-Fourier trajectory synthesis.
//!
//! A rule of order `C` integrates `∫₀^∞ e^{-x} g(x) dx` as `Σ_c γ_c g(ω̂_c)`
//! and is exact for polynomial `g` up to degree `2C-1`. The same nodes and
//! weights turn sampled frequency-function values into time trajectories
//! through the cosine synthesis
//! `u(t) ≈ (1/π) Σ_c α_c cos(ω̂_c t) γ_c`.
//!
//! Nodes are found by Newton iteration on the Laguerre three-term
//! recurrence. All polynomial evaluations use the exponentially scaled
//! function `e^{-x/2} L_n(x)`, which stays O(1) across the node range and
//! keeps both the root residuals and the weights accurate at high order
//! (the unscaled polynomial overflows the working precision of f64 long
//! before order 64).

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Largest supported quadrature order.
pub const MAX_ORDER: usize = 64;

/// Residual tolerance for converged roots, measured on `e^{-x/2} L_C(x)`.
const ROOT_RESIDUAL_TOL: f64 = 1e-10;

/// A Gauss-Laguerre rule: `order` nodes `ω̂_c` (ascending, positive) and
/// weights `γ_c` with `Σ_c γ_c = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GLRule {
    order: usize,
    nodes: Array1<f64>,
    weights: Array1<f64>,
}

/// Evaluates the scaled Laguerre pair `(e^{-x/2} L_n(x), e^{-x/2} L_{n-1}(x))`
/// by the three-term recurrence.
fn laguerre_scaled(n: usize, x: f64) -> (f64, f64) {
    let mut p1 = (-0.5 * x).exp();
    let mut p2 = 0.0;
    for j in 1..=n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = ((2.0 * jf - 1.0 - x) * p2 - (jf - 1.0) * p3) / jf;
    }
    (p1, p2)
}

impl GLRule {
    /// Builds the rule of the given order (`1 ..= 64`).
    ///
    /// Initial root guesses follow the standard asymptotic estimates and are
    /// polished by Newton steps until the relative step is below 1e-15 or
    /// the step stops shrinking. Fails if a root does not converge.
    pub fn new(order: usize) -> Result<Self> {
        if order < 1 || order > MAX_ORDER {
            return Err(Error::Usage(format!(
                "quadrature order must be in 1..={MAX_ORDER}, got {order}"
            )));
        }
        let n = order;
        let nf = n as f64;
        let mut nodes = Array1::<f64>::zeros(n);
        let mut weights = Array1::<f64>::zeros(n);
        let mut x = 0.0_f64;
        for i in 0..n {
            // Asymptotic initial guesses for the i-th smallest root.
            if i == 0 {
                x = 3.0 / (1.0 + 2.4 * nf);
            } else if i == 1 {
                x += 15.0 / (1.0 + 2.5 * nf);
            } else {
                let ai = (i - 1) as f64;
                x += (1.0 + 2.55 * ai) / (1.9 * ai) * (x - nodes[i - 2]);
            }
            let mut converged = false;
            for _ in 0..100 {
                let (p1, p2) = laguerre_scaled(n, x);
                // x L_n'(x) = n (L_n(x) - L_{n-1}(x)); scaling cancels in the ratio.
                let pp = nf * (p1 - p2) / x;
                let dx = p1 / pp;
                x -= dx;
                if dx.abs() <= 1e-15 * x.abs() {
                    converged = true;
                    break;
                }
            }
            let residual = laguerre_scaled(n, x).0.abs();
            if !converged && residual > ROOT_RESIDUAL_TOL {
                return Err(Error::Numerical(format!(
                    "Gauss-Laguerre root {i} of order {n} did not converge (residual {residual:.3e})"
                )));
            }
            if residual > ROOT_RESIDUAL_TOL {
                return Err(Error::Numerical(format!(
                    "Gauss-Laguerre root {i} of order {n} has residual {residual:.3e}"
                )));
            }
            nodes[i] = x;
            // γ = x / ((n+1)² L_{n+1}(x)²), evaluated through the scaled
            // function: L_{n+1}(x)² = e^{x} (e^{-x/2} L_{n+1}(x))².
            let (q1, _) = laguerre_scaled(n + 1, x);
            let np1 = (n + 1) as f64;
            weights[i] = x * (-x).exp() / (np1 * np1 * q1 * q1);
        }
        Ok(GLRule {
            order,
            nodes,
            weights,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Quadrature nodes `ω̂_c`, strictly increasing and positive.
    pub fn nodes(&self) -> &Array1<f64> {
        &self.nodes
    }

    /// Quadrature weights `γ_c`, positive, summing to 1.
    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    /// Approximates `∫₀^∞ e^{-x} g(x) dx` as `Σ_c γ_c g(ω̂_c)`.
    ///
    /// Fails if `g` is non-finite at any node.
    pub fn integrate<F: Fn(f64) -> f64>(&self, g: F) -> Result<f64> {
        let mut acc = 0.0;
        for (c, (&x, &w)) in self.nodes.iter().zip(self.weights.iter()).enumerate() {
            let v = g(x);
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "integrand is not finite at node {c} (x = {x})"
                )));
            }
            acc += w * v;
        }
        Ok(acc)
    }

    /// Synthesizes one trajectory value
    /// `u(t) = (1/π) Σ_c α_c γ_c cos(ω̂_c t)`
    /// from frequency-function samples `α_c` at the nodes.
    pub fn synth_trajectory(&self, alpha: &Array1<f64>, t: f64) -> f64 {
        assert_eq!(
            alpha.len(),
            self.order,
            "synth_trajectory: alpha length {} != order {}",
            alpha.len(),
            self.order
        );
        let mut acc = 0.0;
        for ((&a, &x), &w) in alpha.iter().zip(self.nodes.iter()).zip(self.weights.iter()) {
            acc += a * w * (x * t).cos();
        }
        acc / PI
    }

    /// Row-wise synthesis: row `i` of `alpha_rows` is evaluated at `times[i]`.
    ///
    /// Each row is an independent trajectory sample at the paired time, so
    /// the result has one value per row.
    pub fn synth_batch(&self, alpha_rows: &Array2<f64>, times: &Array1<f64>) -> Array1<f64> {
        assert_eq!(
            alpha_rows.ncols(),
            self.order,
            "synth_batch: alpha column count {} != order {}",
            alpha_rows.ncols(),
            self.order
        );
        assert_eq!(
            alpha_rows.nrows(),
            times.len(),
            "synth_batch: {} rows but {} times",
            alpha_rows.nrows(),
            times.len()
        );
        let mut out = Array1::<f64>::zeros(alpha_rows.nrows());
        for (i, row) in alpha_rows.rows().into_iter().enumerate() {
            let t = times[i];
            let mut acc = 0.0;
            for ((&a, &x), &w) in row.iter().zip(self.nodes.iter()).zip(self.weights.iter()) {
                acc += a * w * (x * t).cos();
            }
            out[i] = acc / PI;
        }
        out
    }
}
