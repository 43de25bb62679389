//! NONFAT: nonparametric factor trajectories for dynamic tensor
//! decomposition.
//!
//! Entries of a sparsely observed tensor are explained by per-entity factor
//! trajectories — time functions synthesized from Gaussian-process samples
//! in the frequency domain via Gauss-Laguerre quadrature — combined by a
//! second-level Gaussian process. Training maximizes a nested
//! reparameterized stochastic ELBO over sparse variational posteriors at
//! both levels.
//!
//! Module map:
//! - [`quadrature`]: Gauss-Laguerre rules and trajectory synthesis.
//! - [`kernels`]: squared-exponential and product kernels, jittered
//!   Cholesky.
//! - [`gaussians`]: matrix-Gaussian posteriors, KL terms, conditional
//!   sampling.
//! - [`tape`]: reverse-mode automatic differentiation over matrices.
//! - [`data`]: CSV ingestion, splitting, normalization, synthetic data.
//! - [`model`]: parameters, reparameterized sampling, ELBO, prediction.
//! - [`optim`]: Adam, the training loop, metrics, gradient checking.
//! - [`cli`]: command implementations, run configs, checkpoints.
//! - [`error`]: shared error type with process exit codes.

pub mod cli;
pub mod data;
pub mod error;
pub mod gaussians;
pub mod kernels;
mod linalg;
pub mod model;
pub mod optim;
pub mod quadrature;
mod seeding;
pub mod tape;

pub use error::{Error, Result};
