//! Matrix-Gaussian distributions, KL divergences, and conditional-Gaussian
//! sampling for both GP levels.
//!
//! The first-level variational posteriors over pseudo outputs are matrix
//! Gaussians `MN(A, LLᵀ, RRᵀ)`; the second-level posterior over `h` is a
//! full-covariance Gaussian. All sampling operations are deterministic
//! functions of their parameters and an externally drawn standard-normal
//! noise argument, so gradients can flow through the samples
//! (reparameterization).

use crate::error::{Error, Result};
use crate::kernels::{chol_jitter, ProductKernel, SEKernel};
use crate::linalg;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use std::f64::consts::PI;

/// Matrix-Gaussian distribution `MN(A, L·Lᵀ, R·Rᵀ)`: the density of `vec(X)`
/// is multivariate normal with mean `vec(A)` and covariance `(RRᵀ) ⊗ (LLᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixGaussian {
    mean: Array2<f64>,
    row_chol: Array2<f64>,
    col_chol: Array2<f64>,
}

/// Checks that `m` is lower-triangular with strictly positive diagonal.
fn check_lower_chol(m: &Array2<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Numerical(format!("{what} must be square")));
    }
    for i in 0..m.nrows() {
        if m[[i, i]] <= 0.0 {
            return Err(Error::Numerical(format!(
                "{what} must have a strictly positive diagonal (entry {i} is {})",
                m[[i, i]]
            )));
        }
        for j in (i + 1)..m.ncols() {
            if m[[i, j]] != 0.0 {
                return Err(Error::Numerical(format!(
                    "{what} must be lower-triangular (entry [{i}][{j}] is {})",
                    m[[i, j]]
                )));
            }
        }
    }
    Ok(())
}

impl MatrixGaussian {
    /// Builds the distribution, validating that both factors are
    /// lower-triangular with strictly positive diagonals and that shapes
    /// line up with the mean.
    pub fn new(mean: Array2<f64>, row_chol: Array2<f64>, col_chol: Array2<f64>) -> Result<Self> {
        check_lower_chol(&row_chol, "row factor")?;
        check_lower_chol(&col_chol, "column factor")?;
        if row_chol.nrows() != mean.nrows() || col_chol.nrows() != mean.ncols() {
            return Err(Error::Numerical(format!(
                "matrix-Gaussian shapes disagree: mean {}x{}, row factor {}, column factor {}",
                mean.nrows(),
                mean.ncols(),
                row_chol.nrows(),
                col_chol.nrows()
            )));
        }
        Ok(MatrixGaussian {
            mean,
            row_chol,
            col_chol,
        })
    }

    pub fn mean(&self) -> &Array2<f64> {
        &self.mean
    }

    pub fn row_chol(&self) -> &Array2<f64> {
        &self.row_chol
    }

    pub fn col_chol(&self) -> &Array2<f64> {
        &self.col_chol
    }

    /// Number of rows of the mean.
    pub fn nrows(&self) -> usize {
        self.mean.nrows()
    }

    /// Number of columns of the mean.
    pub fn ncols(&self) -> usize {
        self.mean.ncols()
    }
}

/// Full-covariance Gaussian posterior `N(mean, chol·cholᵀ)` for the
/// second-level pseudo outputs `h`. The covariance is kept as a
/// lower-triangular factor; the dimension is small enough that a full
/// (rather than diagonal) covariance costs little.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussianPosterior {
    mean: Array1<f64>,
    chol: Array2<f64>,
}

impl DiagGaussianPosterior {
    /// Builds the posterior, validating the factor.
    pub fn new(mean: Array1<f64>, chol: Array2<f64>) -> Result<Self> {
        check_lower_chol(&chol, "posterior factor")?;
        if chol.nrows() != mean.len() {
            return Err(Error::Numerical(format!(
                "posterior shapes disagree: mean length {}, factor {}",
                mean.len(),
                chol.nrows()
            )));
        }
        Ok(DiagGaussianPosterior { mean, chol })
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn chol(&self) -> &Array2<f64> {
        &self.chol
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Reparameterized draw `mean + chol·noise`.
    pub fn sample(&self, noise: ArrayView1<f64>) -> Array1<f64> {
        assert_eq!(noise.len(), self.dim(), "noise length mismatch");
        let n2 = noise.insert_axis(Axis(1));
        let prod = self.chol.dot(&n2);
        &self.mean + &prod.index_axis(Axis(1), 0)
    }
}

/// Log-density of `X` under the matrix Gaussian `d`:
/// `−½ tr(Σ_c⁻¹ (X−A)ᵀ Σ_r⁻¹ (X−A)) − (nm/2)·log 2π − (m/2)·log|Σ_r| − (n/2)·log|Σ_c|`
/// with `Σ_r = LLᵀ`, `Σ_c = RRᵀ`.
pub fn mg_logpdf(x: ArrayView2<f64>, d: &MatrixGaussian) -> f64 {
    assert_eq!(x.nrows(), d.nrows(), "mg_logpdf: row count mismatch");
    assert_eq!(x.ncols(), d.ncols(), "mg_logpdf: column count mismatch");
    let n = d.nrows() as f64;
    let m = d.ncols() as f64;
    let diff = &x - d.mean();
    // tr(Σ_c⁻¹ Dᵀ Σ_r⁻¹ D) = ‖R⁻¹ (L⁻¹ D)ᵀ‖²_F.
    let li_d = linalg::solve_lower(&d.row_chol().view(), &diff.view());
    let ri_dt = linalg::solve_lower(&d.col_chol().view(), &li_d.t().to_owned().view());
    let quad: f64 = ri_dt.iter().map(|v| v * v).sum();
    let logdet_r = linalg::logdet_from_chol(&d.row_chol().view());
    let logdet_c = linalg::logdet_from_chol(&d.col_chol().view());
    -0.5 * quad - 0.5 * n * m * (2.0 * PI).ln() - 0.5 * m * logdet_r - 0.5 * n * logdet_c
}

/// Reparameterized matrix-Gaussian draw `A + L·S·Rᵀ` for standard-normal
/// noise `S`.
pub fn mg_sample(d: &MatrixGaussian, noise: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(noise.nrows(), d.nrows(), "mg_sample: noise row mismatch");
    assert_eq!(noise.ncols(), d.ncols(), "mg_sample: noise column mismatch");
    d.mean() + &d.row_chol().dot(&noise.dot(&d.col_chol().t()))
}

/// KL divergence `KL(MN(A, LLᵀ, RRᵀ) ‖ MN(0, K_Z, K_ω))`, exploiting the
/// Kronecker structure so no `nm×nm` matrix is ever formed:
/// `½[ tr(K_ω⁻¹RRᵀ)·tr(K_Z⁻¹LLᵀ) + tr(K_ω⁻¹AᵀK_Z⁻¹A) − nm
///    + m·log|K_Z| + n·log|K_ω| − m·log|LLᵀ| − n·log|RRᵀ| ]`.
///
/// The priors are factorized through [`chol_jitter`] with the given base
/// jitter; fails if a prior stays indefinite after escalation.
pub fn kl_mg_prior(
    q: &MatrixGaussian,
    prior_row: ArrayView2<f64>,
    prior_col: ArrayView2<f64>,
    jitter: f64,
) -> Result<f64> {
    let n = q.nrows();
    let m = q.ncols();
    assert_eq!(prior_row.nrows(), n, "kl_mg_prior: row-prior size mismatch");
    assert_eq!(prior_col.nrows(), m, "kl_mg_prior: column-prior size mismatch");
    let (pz, _) = chol_jitter(&prior_row, jitter)?;
    let (pw, _) = chol_jitter(&prior_col, jitter)?;
    // tr(K⁻¹ C Cᵀ) = ‖P⁻¹ C‖²_F for K = P Pᵀ.
    let piz_l = linalg::solve_lower(&pz.view(), &q.row_chol().view());
    let tr_row: f64 = piz_l.iter().map(|v| v * v).sum();
    let piw_r = linalg::solve_lower(&pw.view(), &q.col_chol().view());
    let tr_col: f64 = piw_r.iter().map(|v| v * v).sum();
    // tr(K_ω⁻¹ Aᵀ K_Z⁻¹ A) = ‖P_ω⁻¹ (P_Z⁻¹ A)ᵀ‖²_F.
    let piz_a = linalg::solve_lower(&pz.view(), &q.mean().view());
    let piw_at = linalg::solve_lower(&pw.view(), &piz_a.t().to_owned().view());
    let mean_term: f64 = piw_at.iter().map(|v| v * v).sum();
    let nf = n as f64;
    let mf = m as f64;
    let kl = 0.5
        * (tr_col * tr_row + mean_term - nf * mf
            + mf * linalg::logdet_from_chol(&pz.view())
            + nf * linalg::logdet_from_chol(&pw.view())
            - mf * linalg::logdet_from_chol(&q.row_chol().view())
            - nf * linalg::logdet_from_chol(&q.col_chol().view()));
    Ok(kl)
}

/// KL divergence `KL(N(μ, CCᵀ) ‖ N(0, prior_cov))` for the second-level
/// posterior, computed through Cholesky solves.
pub fn kl_gaussian(
    q: &DiagGaussianPosterior,
    prior_cov: ArrayView2<f64>,
    jitter: f64,
) -> Result<f64> {
    let a = q.dim();
    assert_eq!(prior_cov.nrows(), a, "kl_gaussian: prior size mismatch");
    let (p, _) = chol_jitter(&prior_cov, jitter)?;
    let pi_c = linalg::solve_lower(&p.view(), &q.chol().view());
    let trace: f64 = pi_c.iter().map(|v| v * v).sum();
    let mu2 = q.mean().view().insert_axis(Axis(1)).to_owned();
    let pi_mu = linalg::solve_lower(&p.view(), &mu2.view());
    let mean_term: f64 = pi_mu.iter().map(|v| v * v).sum();
    Ok(0.5
        * (trace + mean_term - a as f64 + linalg::logdet_from_chol(&p.view())
            - linalg::logdet_from_chol(&q.chol().view())))
}

/// Samples one row of the first-level GP values at the quadrature
/// frequencies, conditioned on the pseudo outputs `Ĝ`:
///
/// `Γ_j + sqrt(Ω_jj) · (K_omega_chol · noise)ᵀ`
///
/// with mean `Γ_j = κ_e(e_j, Z) K_ZZ⁻¹ Ĝ` and scalar Schur complement
/// `Ω_jj = 1 − κ_e(e_j, Z) K_ZZ⁻¹ κ_e(Z, e_j)` (clamped at 0 against
/// round-off). `K_ZZ` is the embedding-kernel Gram over the pseudo inputs,
/// factorized with the given base jitter. Deterministic and differentiable
/// for fixed noise.
pub fn cond_row_sample(
    e_j: ArrayView1<f64>,
    z: ArrayView2<f64>,
    g_hat: ArrayView2<f64>,
    kernel: &ProductKernel,
    k_omega_chol: ArrayView2<f64>,
    noise: ArrayView1<f64>,
    jitter: f64,
) -> Result<Array1<f64>> {
    let a = z.nrows();
    let c = g_hat.ncols();
    assert_eq!(e_j.len(), z.ncols(), "cond_row_sample: embedding dim mismatch");
    assert_eq!(g_hat.nrows(), a, "cond_row_sample: pseudo-output row mismatch");
    assert_eq!(k_omega_chol.nrows(), c, "cond_row_sample: frequency factor mismatch");
    assert_eq!(noise.len(), c, "cond_row_sample: noise length mismatch");
    let gram = kernel.embed_kernel.gram(z);
    let (lz, _) = chol_jitter(&gram.view(), jitter)?;
    let e_row = e_j.insert_axis(Axis(0));
    let k_j = kernel.embed_kernel.cross(z, e_row); // a×1
    let w = linalg::solve_lower(&lz.view(), &k_j.view());
    let beta = linalg::solve_lower_t(&lz.view(), &w.view()); // K_ZZ⁻¹ k_j
    let gamma = g_hat.t().dot(&beta); // C×1
    let kb: f64 = k_j.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
    let omega = (1.0 - kb).max(0.0);
    let spread = k_omega_chol.dot(&noise.insert_axis(Axis(1)));
    let out = &gamma + &(omega.sqrt() * &spread);
    Ok(out.index_axis(Axis(1), 0).to_owned())
}

/// Samples the second-level GP value at one input `v`, conditioned on the
/// pseudo outputs `ĥ`: `μ(v) + sqrt(var(v)) · noise` with
/// `μ(v) = κ_g(v, Z_g) K_g⁻¹ ĥ` and
/// `var(v) = 1 − κ_g(v, Z_g) K_g⁻¹ κ_g(Z_g, v)` (clamped at 0).
/// Deterministic and differentiable for fixed noise.
pub fn cond_scalar_sample(
    v: ArrayView1<f64>,
    z_g: ArrayView2<f64>,
    h_hat: ArrayView1<f64>,
    kernel: &SEKernel,
    noise: f64,
    jitter: f64,
) -> Result<f64> {
    let a = z_g.nrows();
    assert_eq!(v.len(), z_g.ncols(), "cond_scalar_sample: input dim mismatch");
    assert_eq!(h_hat.len(), a, "cond_scalar_sample: pseudo-output length mismatch");
    let gram = kernel.gram(z_g);
    let (lg, _) = chol_jitter(&gram.view(), jitter)?;
    let v_row = v.insert_axis(Axis(0));
    let k_v = kernel.cross(z_g, v_row); // a×1
    let w = linalg::solve_lower(&lg.view(), &k_v.view());
    let beta = linalg::solve_lower_t(&lg.view(), &w.view());
    let mu: f64 = h_hat.iter().zip(beta.iter()).map(|(h, b)| h * b).sum();
    let kb: f64 = k_v.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
    let var = (1.0 - kb).max(0.0);
    Ok(mu + var.sqrt() * noise)
}
