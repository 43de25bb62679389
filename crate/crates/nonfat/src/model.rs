//! The NONFAT model core: parameters, nested reparameterized sampling, the
//! stochastic ELBO, and prediction.
//!
//! Each entity `j` of tensor mode `k` owns `R` factor trajectories
//! `u^k_{j,r}(t)`, synthesized from first-level GP samples at the
//! Gauss-Laguerre frequencies via [`crate::quadrature::GLRule`]. A
//! second-level GP maps the concatenated trajectory values of an entry to
//! its latent value `m`, observed under Gaussian noise.
//!
//! Two evaluation paths compute the same math:
//! - a batched path on the [`crate::tape`] graph (training and prediction),
//!   which never forms a matrix larger than the pseudo-input blocks or
//!   `B×max(a, C)`;
//! - a per-entity plain path through [`crate::gaussians`] and
//!   [`crate::quadrature`] (trajectory export and the test oracles).
//!
//! All randomness enters through [`NoiseBundle`]; for fixed noise every
//! sampled quantity is a deterministic, differentiable function of the
//! parameters.

use crate::data::{Observation, TensorMeta};
use crate::error::{Error, Result};
use crate::gaussians::{
    cond_row_sample, cond_scalar_sample, mg_sample, DiagGaussianPosterior, MatrixGaussian,
};
use crate::kernels::{chol_jitter, ProductKernel, SEKernel};
use crate::optim::TrainConfig;
use crate::quadrature::GLRule;
use crate::seeding::{stream_rng, Purpose};
use crate::tape::{Graph, NodeId};
use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;
use std::f64::consts::PI;

/// Variational posterior over one pseudo-output matrix `G^k_r`, stored in
/// unconstrained form: the factors are kept as raw square matrices whose
/// strict lower triangle is used directly and whose diagonal is
/// exponentiated (see [`crate::tape::Graph::lower_with_exp_diag`]).
#[derive(Debug, Clone, PartialEq)]
pub struct MgPosterior {
    /// Posterior mean `A^k_r`, `a_k×C`.
    pub mean: Array2<f64>,
    /// Raw row factor, `a_k×a_k`.
    pub raw_row: Array2<f64>,
    /// Raw column factor, `C×C`.
    pub raw_col: Array2<f64>,
}

/// Variational posterior over the second-level pseudo outputs `h`, same raw
/// factor convention.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryPosterior {
    /// Posterior mean, `a_g×1`.
    pub mean: Array2<f64>,
    /// Raw covariance factor, `a_g×a_g`.
    pub raw_chol: Array2<f64>,
}

/// Maps a raw matrix to its lower-triangular factor: strict lower part
/// copied, diagonal exponentiated.
fn lower_from_raw(raw: &Array2<f64>) -> Array2<f64> {
    let n = raw.nrows();
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        l[[i, i]] = raw[[i, i]].exp();
        for j in 0..i {
            l[[i, j]] = raw[[i, j]];
        }
    }
    l
}

/// All learnable state of a NONFAT model plus the fixed quadrature rule and
/// the shape metadata needed to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct NonfatParams {
    /// Entities per mode (`d_k`).
    pub dims: Vec<usize>,
    /// Trajectories per entity (`R`).
    pub rank: usize,
    /// Embedding dimension (`s`).
    pub embed_dim: usize,
    /// Frequency embeddings `E^k`, one `d_k×s` matrix per mode.
    pub embeddings: Vec<Array2<f64>>,
    /// First-level pseudo inputs `Z^k`, one `a_k×s` matrix per mode.
    pub pseudo_in_freq: Vec<Array2<f64>>,
    /// Posteriors `q(G^k_r)`, indexed `[k][r]`.
    pub pseudo_out_freq: Vec<Vec<MgPosterior>>,
    /// Second-level pseudo inputs `Z_g`, `a_g×(K·R)`.
    pub pseudo_in_entry: Array2<f64>,
    /// Posterior `q(h)`.
    pub pseudo_out_entry: EntryPosterior,
    /// First-level kernels: one per mode, or one per `(mode, component)`
    /// when `per_r_kernels` is set (flat index `k·R + r`).
    pub kernels_freq: Vec<ProductKernel>,
    /// Whether `kernels_freq` is indexed per `(k, r)` rather than per mode.
    pub per_r_kernels: bool,
    /// Second-level kernel `κ_g`.
    pub kernel_entry: SEKernel,
    /// `σ² = exp(log_noise_var)`.
    pub log_noise_var: f64,
    /// Fixed Gauss-Laguerre rule (order `C`).
    pub gl_rule: GLRule,
    /// Base jitter for every kernel factorization.
    pub jitter: f64,
}

impl NonfatParams {
    pub fn num_modes(&self) -> usize {
        self.dims.len()
    }

    pub fn quad_order(&self) -> usize {
        self.gl_rule.order()
    }

    pub fn pseudo_freq_count(&self) -> usize {
        self.pseudo_in_freq[0].nrows()
    }

    pub fn pseudo_entry_count(&self) -> usize {
        self.pseudo_in_entry.nrows()
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }

    fn kern_idx(&self, k: usize, r: usize) -> usize {
        if self.per_r_kernels {
            k * self.rank + r
        } else {
            k
        }
    }

    /// First-level kernel for `(mode, component)`.
    pub fn freq_kernel(&self, k: usize, r: usize) -> &ProductKernel {
        &self.kernels_freq[self.kern_idx(k, r)]
    }

    /// Validated matrix-Gaussian view of `q(G^k_r)`.
    pub fn posterior(&self, k: usize, r: usize) -> Result<MatrixGaussian> {
        let p = &self.pseudo_out_freq[k][r];
        MatrixGaussian::new(
            p.mean.clone(),
            lower_from_raw(&p.raw_row),
            lower_from_raw(&p.raw_col),
        )
    }

    /// Validated Gaussian view of `q(h)`.
    pub fn entry_posterior(&self) -> Result<DiagGaussianPosterior> {
        let p = &self.pseudo_out_entry;
        DiagGaussianPosterior::new(
            p.mean.index_axis(Axis(1), 0).to_owned(),
            lower_from_raw(&p.raw_chol),
        )
    }

    /// Quadrature frequencies as a `C×1` matrix (kernel input layout).
    fn freq_points(&self) -> Array2<f64> {
        let c = self.quad_order();
        let mut pts = Array2::zeros((c, 1));
        for i in 0..c {
            pts[[i, 0]] = self.gl_rule.nodes()[i];
        }
        pts
    }

    /// Names of every learnable tensor, in a stable order. Scalars
    /// (lengthscales, noise) are exposed as 1×1 matrices.
    pub fn leaf_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for k in 0..self.num_modes() {
            names.push(format!("embeddings.k{k}"));
        }
        for k in 0..self.num_modes() {
            names.push(format!("pseudo_in_freq.k{k}"));
        }
        for k in 0..self.num_modes() {
            for r in 0..self.rank {
                names.push(format!("pseudo_out_freq.k{k}.r{r}.mean"));
                names.push(format!("pseudo_out_freq.k{k}.r{r}.raw_row"));
                names.push(format!("pseudo_out_freq.k{k}.r{r}.raw_col"));
            }
        }
        names.push("pseudo_in_entry".to_string());
        names.push("pseudo_out_entry.mean".to_string());
        names.push("pseudo_out_entry.raw_chol".to_string());
        for i in 0..self.kernels_freq.len() {
            names.push(format!("kernels_freq.{i}.embed_log_lengthscale"));
            names.push(format!("kernels_freq.{i}.freq_log_lengthscale"));
        }
        names.push("kernel_entry.log_lengthscale".to_string());
        names.push("log_noise_var".to_string());
        names
    }

    /// Copy of the named leaf, if it exists.
    pub fn leaf(&self, name: &str) -> Option<Array2<f64>> {
        let scalar = |v: f64| Array2::from_elem((1, 1), v);
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["embeddings", k] => {
                let k = parse_tagged(k, 'k')?;
                self.embeddings.get(k).cloned()
            }
            ["pseudo_in_freq", k] => {
                let k = parse_tagged(k, 'k')?;
                self.pseudo_in_freq.get(k).cloned()
            }
            ["pseudo_out_freq", k, r, field] => {
                let k = parse_tagged(k, 'k')?;
                let r = parse_tagged(r, 'r')?;
                let p = self.pseudo_out_freq.get(k)?.get(r)?;
                match *field {
                    "mean" => Some(p.mean.clone()),
                    "raw_row" => Some(p.raw_row.clone()),
                    "raw_col" => Some(p.raw_col.clone()),
                    _ => None,
                }
            }
            ["pseudo_in_entry"] => Some(self.pseudo_in_entry.clone()),
            ["pseudo_out_entry", "mean"] => Some(self.pseudo_out_entry.mean.clone()),
            ["pseudo_out_entry", "raw_chol"] => Some(self.pseudo_out_entry.raw_chol.clone()),
            ["kernels_freq", i, "embed_log_lengthscale"] => {
                let i: usize = i.parse().ok()?;
                Some(scalar(self.kernels_freq.get(i)?.embed_kernel.log_lengthscale))
            }
            ["kernels_freq", i, "freq_log_lengthscale"] => {
                let i: usize = i.parse().ok()?;
                Some(scalar(self.kernels_freq.get(i)?.freq_kernel.log_lengthscale))
            }
            ["kernel_entry", "log_lengthscale"] => {
                Some(scalar(self.kernel_entry.log_lengthscale))
            }
            ["log_noise_var"] => Some(scalar(self.log_noise_var)),
            _ => None,
        }
    }

    /// Overwrites the named leaf. Returns false if the name is unknown or
    /// the shape disagrees.
    pub fn set_leaf(&mut self, name: &str, value: &Array2<f64>) -> bool {
        let shape_ok = |t: &Array2<f64>| t.dim() == value.dim();
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["embeddings", k] => match parse_tagged(k, 'k') {
                Some(k) if k < self.embeddings.len() && shape_ok(&self.embeddings[k]) => {
                    self.embeddings[k] = value.clone();
                    true
                }
                _ => false,
            },
            ["pseudo_in_freq", k] => match parse_tagged(k, 'k') {
                Some(k) if k < self.pseudo_in_freq.len() && shape_ok(&self.pseudo_in_freq[k]) => {
                    self.pseudo_in_freq[k] = value.clone();
                    true
                }
                _ => false,
            },
            ["pseudo_out_freq", k, r, field] => {
                let (Some(k), Some(r)) = (parse_tagged(k, 'k'), parse_tagged(r, 'r')) else {
                    return false;
                };
                let Some(p) = self.pseudo_out_freq.get_mut(k).and_then(|v| v.get_mut(r)) else {
                    return false;
                };
                let target = match *field {
                    "mean" => &mut p.mean,
                    "raw_row" => &mut p.raw_row,
                    "raw_col" => &mut p.raw_col,
                    _ => return false,
                };
                if target.dim() != value.dim() {
                    return false;
                }
                *target = value.clone();
                true
            }
            ["pseudo_in_entry"] => {
                if !shape_ok(&self.pseudo_in_entry) {
                    return false;
                }
                self.pseudo_in_entry = value.clone();
                true
            }
            ["pseudo_out_entry", "mean"] => {
                if !shape_ok(&self.pseudo_out_entry.mean) {
                    return false;
                }
                self.pseudo_out_entry.mean = value.clone();
                true
            }
            ["pseudo_out_entry", "raw_chol"] => {
                if !shape_ok(&self.pseudo_out_entry.raw_chol) {
                    return false;
                }
                self.pseudo_out_entry.raw_chol = value.clone();
                true
            }
            ["kernels_freq", i, "embed_log_lengthscale"] => {
                match i.parse::<usize>().ok().and_then(|i| self.kernels_freq.get_mut(i)) {
                    Some(kern) if value.dim() == (1, 1) => {
                        kern.embed_kernel.log_lengthscale = value[[0, 0]];
                        true
                    }
                    _ => false,
                }
            }
            ["kernels_freq", i, "freq_log_lengthscale"] => {
                match i.parse::<usize>().ok().and_then(|i| self.kernels_freq.get_mut(i)) {
                    Some(kern) if value.dim() == (1, 1) => {
                        kern.freq_kernel.log_lengthscale = value[[0, 0]];
                        true
                    }
                    _ => false,
                }
            }
            ["kernel_entry", "log_lengthscale"] => {
                if value.dim() != (1, 1) {
                    return false;
                }
                self.kernel_entry.log_lengthscale = value[[0, 0]];
                true
            }
            ["log_noise_var"] => {
                if value.dim() != (1, 1) {
                    return false;
                }
                self.log_noise_var = value[[0, 0]];
                true
            }
            _ => false,
        }
    }

    /// Root-sum-square of all learnable entries, for divergence reports.
    pub fn leaf_l2(&self) -> f64 {
        let mut acc = 0.0;
        for name in self.leaf_names() {
            if let Some(v) = self.leaf(&name) {
                acc += v.iter().map(|x| x * x).sum::<f64>();
            }
        }
        acc.sqrt()
    }
}

fn parse_tagged(s: &str, tag: char) -> Option<usize> {
    s.strip_prefix(tag)?.parse().ok()
}

/// Standard-normal noise for one ELBO evaluation over a batch of size `B`:
/// one matrix draw per `(k, r)` (the pseudo-output sample is shared by the
/// whole batch), one frequency-row draw per batch element and `(k, r)`, one
/// draw for the second-level pseudo outputs, and one scalar per batch
/// element.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    /// `[k][r]`: `a_k×C`.
    pub mg_noise: Vec<Vec<Array2<f64>>>,
    /// `[k][r]`: `B×C`; row `b` belongs to batch element `b`.
    pub row_noise: Vec<Vec<Array2<f64>>>,
    /// `a_g`-vector for `ĥ`.
    pub entry_noise: Array1<f64>,
    /// One scalar per batch element.
    pub scalar_noise: Array1<f64>,
}

impl NoiseBundle {
    /// Draws a bundle for the given batch size.
    pub fn draw(params: &NonfatParams, batch_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let c = params.quad_order();
        let a_k = params.pseudo_freq_count();
        let mut normal = |n: usize, m: usize| -> Array2<f64> {
            Array2::from_shape_fn((n, m), |_| StandardNormal.sample(rng))
        };
        let mut mg_noise = Vec::new();
        let mut row_noise = Vec::new();
        for _ in 0..params.num_modes() {
            let mut mg_k = Vec::new();
            let mut row_k = Vec::new();
            for _ in 0..params.rank {
                mg_k.push(normal(a_k, c));
                row_k.push(normal(batch_size, c));
            }
            mg_noise.push(mg_k);
            row_noise.push(row_k);
        }
        let entry_noise = normal(params.pseudo_entry_count(), 1)
            .index_axis(Axis(1), 0)
            .to_owned();
        let scalar_noise = normal(batch_size, 1).index_axis(Axis(1), 0).to_owned();
        NoiseBundle {
            mg_noise,
            row_noise,
            entry_noise,
            scalar_noise,
        }
    }

    /// All-zero bundle (degenerate chain: every sample collapses to its
    /// conditional mean).
    pub fn zeros(params: &NonfatParams, batch_size: usize) -> Self {
        let c = params.quad_order();
        let a_k = params.pseudo_freq_count();
        let k = params.num_modes();
        let r = params.rank;
        NoiseBundle {
            mg_noise: vec![vec![Array2::zeros((a_k, c)); r]; k],
            row_noise: vec![vec![Array2::zeros((batch_size, c)); r]; k],
            entry_noise: Array1::zeros(params.pseudo_entry_count()),
            scalar_noise: Array1::zeros(batch_size),
        }
    }

    /// Bundle for a sub-batch: shared draws are kept, per-element rows are
    /// selected by position.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let pick_mat = |m: &Array2<f64>| -> Array2<f64> {
            let mut out = Array2::zeros((rows.len(), m.ncols()));
            for (i, &r) in rows.iter().enumerate() {
                out.row_mut(i).assign(&m.row(r));
            }
            out
        };
        NoiseBundle {
            mg_noise: self.mg_noise.clone(),
            row_noise: self
                .row_noise
                .iter()
                .map(|per_r| per_r.iter().map(&pick_mat).collect())
                .collect(),
            entry_noise: self.entry_noise.clone(),
            scalar_noise: Array1::from_iter(rows.iter().map(|&r| self.scalar_noise[r])),
        }
    }
}

/// Row-major matrix of `N(0, std²)` draws.
fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize, std: f64) -> Array2<f64> {
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let z: f64 = StandardNormal.sample(rng);
            out[[i, j]] = std * z;
        }
    }
    out
}

/// Initializes parameters for the given tensor shape and configuration.
/// Deterministic in the seed.
pub fn init(meta: &TensorMeta, config: &TrainConfig, seed: u64) -> Result<NonfatParams> {
    config.validate()?;
    let gl_rule = GLRule::new(config.quad_order)?;
    let k_modes = meta.num_modes;
    let s = config.embed_dim;
    let r_rank = config.rank;
    let mut rng = stream_rng(seed, Purpose::Init, 0, 0);
    let mut embeddings = Vec::with_capacity(k_modes);
    for &d in &meta.dims {
        embeddings.push(gaussian_matrix(&mut rng, d, s, 0.1));
    }
    // Pseudo inputs start at (perturbed) embedding rows so the inducing set
    // covers the occupied region of embedding space.
    let mut pseudo_in_freq = Vec::with_capacity(k_modes);
    for k in 0..k_modes {
        let d = meta.dims[k];
        let rows: Vec<usize> = if config.pseudo_freq <= d {
            let mut order: Vec<usize> = (0..d).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            order.truncate(config.pseudo_freq);
            order
        } else {
            use rand::Rng;
            (0..config.pseudo_freq).map(|_| rng.random_range(0..d)).collect()
        };
        let mut z = Array2::zeros((config.pseudo_freq, s));
        for (i, &row) in rows.iter().enumerate() {
            z.row_mut(i).assign(&embeddings[k].row(row));
        }
        let jiggle = gaussian_matrix(&mut rng, config.pseudo_freq, s, 0.01);
        pseudo_in_freq.push(&z + &jiggle);
    }
    let c = config.quad_order;
    let raw_id = |n: usize| -> Array2<f64> {
        // L = 0.1·I in raw form: zero off-diagonal, ln(0.1) diagonal.
        let mut m = Array2::zeros((n, n));
        for i in 0..n {
            m[[i, i]] = 0.1_f64.ln();
        }
        m
    };
    let pseudo_out_freq: Vec<Vec<MgPosterior>> = (0..k_modes)
        .map(|_| {
            (0..r_rank)
                .map(|_| MgPosterior {
                    mean: Array2::zeros((config.pseudo_freq, c)),
                    raw_row: raw_id(config.pseudo_freq),
                    raw_col: raw_id(c),
                })
                .collect()
        })
        .collect();
    let pseudo_in_entry = gaussian_matrix(&mut rng, config.pseudo_entry, k_modes * r_rank, 0.1);
    let pseudo_out_entry = EntryPosterior {
        mean: Array2::zeros((config.pseudo_entry, 1)),
        raw_chol: raw_id(config.pseudo_entry),
    };
    let kernel_count = if config.per_r_kernels {
        k_modes * r_rank
    } else {
        k_modes
    };
    let kernels_freq = (0..kernel_count)
        .map(|_| ProductKernel::new(SEKernel::new(0.0), SEKernel::new(0.0), s))
        .collect();
    Ok(NonfatParams {
        dims: meta.dims.clone(),
        rank: r_rank,
        embed_dim: s,
        embeddings,
        pseudo_in_freq,
        pseudo_out_freq,
        pseudo_in_entry,
        pseudo_out_entry,
        kernels_freq,
        per_r_kernels: config.per_r_kernels,
        kernel_entry: SEKernel::new(0.0),
        log_noise_var: 0.1_f64.ln(),
        gl_rule,
        jitter: config.jitter,
    })
}

// ---------------------------------------------------------------------------
// Batched tape path
// ---------------------------------------------------------------------------

/// Handles into a built batch graph.
struct BatchGraph {
    graph: Graph,
    leaves: Vec<(String, NodeId)>,
    /// `B×1` sampled latent entry values.
    m_hat: NodeId,
    /// Total KL (1×1); present only when the ELBO was requested.
    kl_total: Option<NodeId>,
    /// Full ELBO (1×1); present only when values were supplied.
    elbo: Option<NodeId>,
}

/// Builds the squared-distance matrix between the rows of two nodes via the
/// norm identity, clamped at zero against round-off.
fn sqdist_nodes(g: &mut Graph, x: NodeId, y: NodeId) -> NodeId {
    let xx = g.mul(x, x);
    let rx = g.row_sums(xx);
    let yy = g.mul(y, y);
    let ry = g.row_sums(yy);
    let ryt = g.transpose(ry);
    let yt = g.transpose(y);
    let xyt = g.matmul(x, yt);
    let cross = g.scale(xyt, -2.0);
    let sums = g.add(rx, ryt);
    let sq = g.add(sums, cross);
    g.clamp_min(sq, 0.0)
}

/// Squared-exponential kernel matrix from a squared-distance node and a 1×1
/// log-lengthscale node.
fn se_from_sqdist(g: &mut Graph, sq: NodeId, log_ls: NodeId) -> NodeId {
    let neg2 = g.scale(log_ls, -2.0);
    let inv_ls2 = g.exp(neg2);
    let scaled = g.mul(sq, inv_ls2);
    let expo = g.scale(scaled, -0.5);
    g.exp(expo)
}

/// `tr(K⁻¹ M Mᵀ) = ‖P⁻¹M‖²_F` for `K = PPᵀ`.
fn solve_frob2(g: &mut Graph, chol: NodeId, m: NodeId) -> NodeId {
    let w = g.solve_lower(chol, m);
    let ww = g.mul(w, w);
    g.sum_all(ww)
}

fn build_batch_graph(
    params: &NonfatParams,
    idx_per_mode: &[Vec<usize>],
    times: &[f64],
    values: Option<&[f64]>,
    n_total: usize,
    noise: &NoiseBundle,
    trainable: bool,
) -> Result<BatchGraph> {
    let b = times.len();
    assert!(b > 0, "batch must be nonempty");
    let k_modes = params.num_modes();
    let r_rank = params.rank;
    let c = params.quad_order();
    assert_eq!(idx_per_mode.len(), k_modes, "one index list per mode");
    for idx in idx_per_mode {
        assert_eq!(idx.len(), b, "index list length must match batch size");
    }

    let mut g = Graph::new();
    let mut leaves = Vec::new();
    let mut leaf_ids: BTreeMap<String, NodeId> = BTreeMap::new();
    for name in params.leaf_names() {
        let value = params.leaf(&name).expect("leaf list is exhaustive");
        let id = if trainable {
            g.leaf(value)
        } else {
            g.constant(value)
        };
        leaves.push((name.clone(), id));
        leaf_ids.insert(name, id);
    }
    let node = |map: &BTreeMap<String, NodeId>, name: &str| -> NodeId {
        *map.get(name).unwrap_or_else(|| panic!("missing leaf {name}"))
    };

    // Constant synthesis weights: W[b][c] = cos(ω̂_c·t_b)·γ_c/π.
    let rule = &params.gl_rule;
    let syn = Array2::from_shape_fn((b, c), |(bi, ci)| {
        (rule.nodes()[ci] * times[bi]).cos() * rule.weights()[ci] / PI
    });
    let syn_const = g.constant(syn);
    // Constant squared distances between quadrature frequencies.
    let freq_pts = params.freq_points();
    let freq_sq = Array2::from_shape_fn((c, c), |(i, j)| {
        (freq_pts[[i, 0]] - freq_pts[[j, 0]]).powi(2)
    });
    let freq_sq_const = g.constant(freq_sq);

    let mut kl_terms: Vec<NodeId> = Vec::new();
    let mut traj_cols: Vec<NodeId> = Vec::new(); // k-major, then r
    for k in 0..k_modes {
        let e_k = node(&leaf_ids, &format!("embeddings.k{k}"));
        let z_k = node(&leaf_ids, &format!("pseudo_in_freq.k{k}"));
        let e_batch = g.gather_rows(e_k, &idx_per_mode[k]);
        // Per-kernel-index cache of (L_Z, β, Ω^{1/2}, L_ω): rebuilt only
        // when lengthscales differ across r.
        let mut cache: BTreeMap<usize, (NodeId, NodeId, NodeId, NodeId)> = BTreeMap::new();
        for r in 0..r_rank {
            let ki = params.kern_idx(k, r);
            if !cache.contains_key(&ki) {
                let ll_e = node(&leaf_ids, &format!("kernels_freq.{ki}.embed_log_lengthscale"));
                let ll_w = node(&leaf_ids, &format!("kernels_freq.{ki}.freq_log_lengthscale"));
                let sq_zz = sqdist_nodes(&mut g, z_k, z_k);
                let k_zz = se_from_sqdist(&mut g, sq_zz, ll_e);
                let (l_z, _) = g.chol_jitter(k_zz, params.jitter)?;
                let sq_zx = sqdist_nodes(&mut g, z_k, e_batch);
                let k_zx = se_from_sqdist(&mut g, sq_zx, ll_e); // a_k×B
                let w = g.solve_lower(l_z, k_zx);
                let beta = g.solve_lower_t(l_z, w); // a_k×B
                let prod = g.mul(k_zx, beta);
                let colsum = g.col_sums(prod); // 1×B
                let neg = g.scale(colsum, -1.0);
                let omega_row = g.add_const(neg, 1.0);
                let omega_col = g.transpose(omega_row); // B×1
                let omega_clamped = g.clamp_min(omega_col, 0.0);
                let om_sqrt = g.sqrt(omega_clamped);
                let k_ww = se_from_sqdist(&mut g, freq_sq_const, ll_w);
                let (l_w, _) = g.chol_jitter(k_ww, params.jitter)?;
                cache.insert(ki, (l_z, beta, om_sqrt, l_w));
            }
            let (l_z, beta, om_sqrt, l_w) = cache[&ki];
            let a_mean = node(&leaf_ids, &format!("pseudo_out_freq.k{k}.r{r}.mean"));
            let raw_row = node(&leaf_ids, &format!("pseudo_out_freq.k{k}.r{r}.raw_row"));
            let raw_col = node(&leaf_ids, &format!("pseudo_out_freq.k{k}.r{r}.raw_col"));
            let l_fac = g.lower_with_exp_diag(raw_row);
            let r_fac = g.lower_with_exp_diag(raw_col);
            let s_noise = g.constant(noise.mg_noise[k][r].clone());
            let ls = g.matmul(l_fac, s_noise);
            let r_t = g.transpose(r_fac);
            let lsr = g.matmul(ls, r_t);
            let g_hat = g.add(a_mean, lsr); // a_k×C
            let beta_t = g.transpose(beta);
            let gamma = g.matmul(beta_t, g_hat); // B×C
            let row_noise = g.constant(noise.row_noise[k][r].clone());
            let l_w_t = g.transpose(l_w);
            let spread = g.matmul(row_noise, l_w_t); // B×C
            let scaled_spread = g.mul(om_sqrt, spread);
            let alpha = g.add(gamma, scaled_spread); // B×C
            let weighted = g.mul(alpha, syn_const);
            let u_col = g.row_sums(weighted); // B×1
            traj_cols.push(u_col);

            if values.is_some() {
                // KL(q(G^k_r) ‖ MN(0, K_ZZ, K_ωω)) via the Kronecker form.
                let tr_row = solve_frob2(&mut g, l_z, l_fac);
                let tr_col = solve_frob2(&mut g, l_w, r_fac);
                let piz_a = g.solve_lower(l_z, a_mean);
                let piz_a_t = g.transpose(piz_a);
                let mean_term = solve_frob2(&mut g, l_w, piz_a_t);
                let a_k = params.pseudo_freq_count() as f64;
                let c_f = c as f64;
                let ld_kz = g.sum_log_diag(l_z);
                let ld_kw = g.sum_log_diag(l_w);
                let ld_l = g.sum_diag(raw_row);
                let ld_r = g.sum_diag(raw_col);
                let trace_prod = g.mul(tr_row, tr_col);
                let t1 = g.add(trace_prod, mean_term);
                let t1 = g.add_const(t1, -a_k * c_f);
                let t2 = g.scale(ld_kz, 2.0 * c_f);
                let t3 = g.scale(ld_kw, 2.0 * a_k);
                let t4 = g.scale(ld_l, -2.0 * c_f);
                let t5 = g.scale(ld_r, -2.0 * a_k);
                let sum = g.add(t1, t2);
                let sum = g.add(sum, t3);
                let sum = g.add(sum, t4);
                let sum = g.add(sum, t5);
                kl_terms.push(g.scale(sum, 0.5));
            }
        }
    }

    // Second level: v̂ = concatenated trajectory values, one column per
    // (mode, component).
    let v_hat = g.concat_cols(&traj_cols); // B×(K·R)
    let z_g = node(&leaf_ids, "pseudo_in_entry");
    let ll_g = node(&leaf_ids, "kernel_entry.log_lengthscale");
    let sq_gg = sqdist_nodes(&mut g, z_g, z_g);
    let k_gg = se_from_sqdist(&mut g, sq_gg, ll_g);
    let (l_g, _) = g.chol_jitter(k_gg, params.jitter)?;
    let sq_gx = sqdist_nodes(&mut g, z_g, v_hat);
    let k_gx = se_from_sqdist(&mut g, sq_gx, ll_g); // a_g×B
    let mu_h = node(&leaf_ids, "pseudo_out_entry.mean");
    let raw_ch = node(&leaf_ids, "pseudo_out_entry.raw_chol");
    let c_h = g.lower_with_exp_diag(raw_ch);
    let h_noise = g.constant(
        noise
            .entry_noise
            .clone()
            .insert_axis(Axis(1)),
    );
    let ch_n = g.matmul(c_h, h_noise);
    let h_hat = g.add(mu_h, ch_n); // a_g×1
    let w1 = g.solve_lower(l_g, h_hat);
    let kg_inv_h = g.solve_lower_t(l_g, w1); // a_g×1
    let k_gx_t = g.transpose(k_gx);
    let mu_m = g.matmul(k_gx_t, kg_inv_h); // B×1
    let wg = g.solve_lower(l_g, k_gx);
    let beta_g = g.solve_lower_t(l_g, wg); // a_g×B
    let prod_g = g.mul(k_gx, beta_g);
    let colsum_g = g.col_sums(prod_g); // 1×B
    let neg_g = g.scale(colsum_g, -1.0);
    let var_row = g.add_const(neg_g, 1.0);
    let var_col = g.transpose(var_row);
    let var_clamped = g.clamp_min(var_col, 0.0);
    let sd = g.sqrt(var_clamped); // B×1
    let zeta = g.constant(noise.scalar_noise.clone().insert_axis(Axis(1)));
    let sd_z = g.mul(sd, zeta);
    let m_hat = g.add(mu_m, sd_z); // B×1

    let (kl_total, elbo) = if let Some(y) = values {
        assert_eq!(y.len(), b, "value count must match batch size");
        // KL(q(h) ‖ N(0, K_g)).
        let tr_h = solve_frob2(&mut g, l_g, c_h);
        let mean_h = solve_frob2(&mut g, l_g, mu_h);
        let ld_kg = g.sum_log_diag(l_g);
        let ld_ch = g.sum_diag(raw_ch);
        let a_g = params.pseudo_entry_count() as f64;
        let t1 = g.add(tr_h, mean_h);
        let t1 = g.add_const(t1, -a_g);
        let t2 = g.scale(ld_kg, 2.0);
        let t3 = g.scale(ld_ch, -2.0);
        let sum = g.add(t1, t2);
        let sum = g.add(sum, t3);
        let kl_h = g.scale(sum, 0.5);
        kl_terms.push(kl_h);
        let mut kl_total = kl_terms[0];
        for &t in &kl_terms[1..] {
            kl_total = g.add(kl_total, t);
        }

        // (N/B)·Σ_b log N(y_b | m̂_b, σ²).
        let y_const = g.constant(
            Array1::from(y.to_vec()).insert_axis(Axis(1)),
        );
        let resid = g.sub(y_const, m_hat);
        let resid2 = g.mul(resid, resid);
        let sq_sum = g.sum_all(resid2);
        let lnv = node(&leaf_ids, "log_noise_var");
        let neg_lnv = g.scale(lnv, -1.0);
        let inv_var = g.exp(neg_lnv);
        let quad = g.mul(inv_var, sq_sum);
        let quad = g.scale(quad, -0.5);
        let lnv_term = g.scale(lnv, -(b as f64) / 2.0);
        let const_term = g.scalar(-(b as f64) / 2.0 * (2.0 * PI).ln());
        let ll = g.add(quad, lnv_term);
        let ll = g.add(ll, const_term);
        let ll_scaled = g.scale(ll, n_total as f64 / b as f64);
        let neg_kl = g.scale(kl_total, -1.0);
        let elbo = g.add(ll_scaled, neg_kl);
        (Some(kl_total), Some(elbo))
    } else {
        (None, None)
    };

    Ok(BatchGraph {
        graph: g,
        leaves,
        m_hat,
        kl_total,
        elbo,
    })
}

fn batch_views(batch: &[Observation], k_modes: usize) -> (Vec<Vec<usize>>, Vec<f64>, Vec<f64>) {
    let mut idx_per_mode = vec![Vec::with_capacity(batch.len()); k_modes];
    let mut times = Vec::with_capacity(batch.len());
    let mut values = Vec::with_capacity(batch.len());
    for o in batch {
        assert_eq!(o.indices.len(), k_modes, "observation arity mismatch");
        for (k, &i) in o.indices.iter().enumerate() {
            idx_per_mode[k].push(i);
        }
        times.push(o.time);
        values.push(o.value);
    }
    (idx_per_mode, times, values)
}

/// Internal decomposition of one ELBO evaluation, shared by the estimate,
/// gradient, and consistency tests.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct ElboParts {
    pub elbo: f64,
    pub kl_total: f64,
    pub m_hat: Array1<f64>,
}

pub(crate) fn elbo_parts(
    params: &NonfatParams,
    batch: &[Observation],
    n_total: usize,
    noise: &NoiseBundle,
) -> Result<ElboParts> {
    if batch.is_empty() {
        return Err(Error::Data("elbo batch is empty".into()));
    }
    let (idx, times, values) = batch_views(batch, params.num_modes());
    let bg = build_batch_graph(params, &idx, &times, Some(&values), n_total, noise, false)?;
    let elbo = bg.graph.scalar_value(bg.elbo.expect("values supplied"));
    let kl_total = bg.graph.scalar_value(bg.kl_total.expect("values supplied"));
    let m_hat = bg.graph.value(bg.m_hat).index_axis(Axis(1), 0).to_owned();
    Ok(ElboParts {
        elbo,
        kl_total,
        m_hat,
    })
}

/// Stochastic ELBO estimate for one batch under fixed noise:
/// `−Σ KL(q(G^k_r)‖p(G^k_r)) − KL(q(h)‖p(h)) + (N/B)·Σ_batch log N(y | m̂, σ²)`.
pub fn elbo_estimate(
    params: &NonfatParams,
    batch: &[Observation],
    n_total: usize,
    noise: &NoiseBundle,
) -> Result<f64> {
    let parts = elbo_parts(params, batch, n_total, noise)?;
    if !parts.elbo.is_finite() {
        return Err(Error::Numerical(format!(
            "ELBO is not finite (parameter norm {:.3e})",
            params.leaf_l2()
        )));
    }
    Ok(parts.elbo)
}

/// ELBO and its gradient with respect to every leaf, as a name-keyed map.
/// Leaves that do not influence the value (for instance embeddings of
/// entities outside the batch) get zero entries.
pub fn elbo_with_grad(
    params: &NonfatParams,
    batch: &[Observation],
    n_total: usize,
    noise: &NoiseBundle,
) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Data("elbo batch is empty".into()));
    }
    let (idx, times, values) = batch_views(batch, params.num_modes());
    let mut bg = build_batch_graph(params, &idx, &times, Some(&values), n_total, noise, true)?;
    let root = bg.elbo.expect("values supplied");
    let elbo = bg.graph.scalar_value(root);
    if !elbo.is_finite() {
        return Err(Error::Numerical(format!(
            "ELBO is not finite (parameter norm {:.3e})",
            params.leaf_l2()
        )));
    }
    bg.graph.backward(root);
    let mut grads = BTreeMap::new();
    for (name, id) in &bg.leaves {
        let g = match bg.graph.grad(*id) {
            Some(g) => g.clone(),
            None => Array2::zeros(bg.graph.value(*id).dim()),
        };
        grads.insert(name.clone(), g);
    }
    Ok((elbo, grads))
}

/// Node shapes of the batched ELBO graph, for structural complexity checks.
#[cfg(test)]
pub(crate) fn elbo_graph_shapes(
    params: &NonfatParams,
    batch: &[Observation],
    n_total: usize,
    noise: &NoiseBundle,
) -> Result<Vec<(usize, usize)>> {
    let (idx, times, values) = batch_views(batch, params.num_modes());
    let bg = build_batch_graph(params, &idx, &times, Some(&values), n_total, noise, false)?;
    Ok(bg.graph.node_shapes())
}

// ---------------------------------------------------------------------------
// Plain per-entity path
// ---------------------------------------------------------------------------

/// Samples the `R` trajectory values of each requested `(mode, entity)` at
/// time `t`, using the noise of batch element `elem`. Deterministic for
/// fixed noise.
pub fn sample_trajectories(
    params: &NonfatParams,
    entities: &[(usize, usize)],
    t: f64,
    noise: &NoiseBundle,
    elem: usize,
) -> Result<Vec<Array1<f64>>> {
    assert!(t.is_finite(), "time must be finite");
    let mut out = Vec::with_capacity(entities.len());
    for &(k, j) in entities {
        assert!(k < params.num_modes(), "mode {k} out of range");
        assert!(j < params.dims[k], "entity {j} out of range for mode {k}");
        let mut u = Array1::zeros(params.rank);
        for r in 0..params.rank {
            let alpha = sample_alpha_row(params, k, j, r, noise, elem)?;
            u[r] = params.gl_rule.synth_trajectory(&alpha, t);
        }
        out.push(u);
    }
    Ok(out)
}

/// One conditional draw of the frequency-function row `α̂^k_{j,r}`.
fn sample_alpha_row(
    params: &NonfatParams,
    k: usize,
    j: usize,
    r: usize,
    noise: &NoiseBundle,
    elem: usize,
) -> Result<Array1<f64>> {
    let posterior = params.posterior(k, r)?;
    let g_hat = mg_sample(&posterior, noise.mg_noise[k][r].view());
    let kernel = params.freq_kernel(k, r);
    let k_ww = kernel.freq_kernel.gram(params.freq_points().view());
    let (l_w, _) = chol_jitter(&k_ww.view(), params.jitter)?;
    cond_row_sample(
        params.embeddings[k].row(j),
        params.pseudo_in_freq[k].view(),
        g_hat.view(),
        kernel,
        l_w.view(),
        noise.row_noise[k][r].row(elem),
        params.jitter,
    )
}

/// Samples the latent entry value `m̂` for one entry at time `t` using the
/// noise of batch element `elem`: trajectories → concatenation → second
/// level conditional.
pub fn sample_entry_value(
    params: &NonfatParams,
    entry: &[usize],
    t: f64,
    noise: &NoiseBundle,
    elem: usize,
) -> Result<f64> {
    assert_eq!(entry.len(), params.num_modes(), "entry arity mismatch");
    let entities: Vec<(usize, usize)> = entry.iter().copied().enumerate().collect();
    let trajectories = sample_trajectories(params, &entities, t, noise, elem)?;
    let mut v_hat = Array1::zeros(params.num_modes() * params.rank);
    for (k, u) in trajectories.iter().enumerate() {
        for r in 0..params.rank {
            v_hat[k * params.rank + r] = u[r];
        }
    }
    let q_h = params.entry_posterior()?;
    let h_hat = q_h.sample(noise.entry_noise.view());
    cond_scalar_sample(
        v_hat.view(),
        params.pseudo_in_entry.view(),
        h_hat.view(),
        &params.kernel_entry,
        noise.scalar_noise[elem],
        params.jitter,
    )
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// Monte-Carlo prediction for one queried entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Sample mean of `m̂`.
    pub mean: f64,
    /// Sample variance of `m̂` plus the observation noise `σ²`.
    pub var: f64,
    /// The individual `m̂` draws.
    pub samples: Vec<f64>,
}

/// Predicts entry values at (entry, time) queries by averaging
/// `num_samples` independent reparameterized draws. Deterministic given the
/// seed. Times are on the normalized scale.
pub fn predict(
    params: &NonfatParams,
    entries_with_times: &[(Vec<usize>, f64)],
    num_samples: usize,
    seed: u64,
) -> Result<Vec<Prediction>> {
    assert!(num_samples >= 1, "need at least one sample");
    let n = entries_with_times.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let k_modes = params.num_modes();
    let mut idx_per_mode = vec![Vec::with_capacity(n); k_modes];
    let mut times = Vec::with_capacity(n);
    for (entry, t) in entries_with_times {
        assert_eq!(entry.len(), k_modes, "entry arity mismatch");
        for (k, &i) in entry.iter().enumerate() {
            idx_per_mode[k].push(i);
        }
        times.push(*t);
    }
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(num_samples); n];
    for s in 0..num_samples {
        let mut rng = stream_rng(seed, Purpose::Prediction, s as u64, 0);
        let bundle = NoiseBundle::draw(params, n, &mut rng);
        let bg = build_batch_graph(params, &idx_per_mode, &times, None, n, &bundle, false)?;
        let m = bg.graph.value(bg.m_hat);
        for i in 0..n {
            samples[i].push(m[[i, 0]]);
        }
    }
    let noise_var = params.noise_var();
    Ok(samples
        .into_iter()
        .map(|draws| {
            let s_count = draws.len() as f64;
            let mean = draws.iter().sum::<f64>() / s_count;
            let var_m = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / s_count;
            Prediction {
                mean,
                var: var_m + noise_var,
                samples: draws,
            }
        })
        .collect())
}

/// Monte-Carlo mean and standard deviation of the trajectory
/// `u^k_{j,r}(t)` over a time grid (normalized scale). Each sample draws
/// one frequency row and synthesizes the whole curve from it.
pub fn export_trajectory(
    params: &NonfatParams,
    mode: usize,
    entity: usize,
    component: usize,
    time_grid: &Array1<f64>,
    num_samples: usize,
    seed: u64,
) -> Result<(Array1<f64>, Array1<f64>)> {
    assert!(mode < params.num_modes(), "mode out of range");
    assert!(entity < params.dims[mode], "entity out of range");
    assert!(component < params.rank, "component out of range");
    assert!(num_samples >= 1, "need at least one sample");
    assert!(time_grid.iter().all(|t| t.is_finite()), "grid must be finite");
    let g = time_grid.len();
    let mut sum = Array1::<f64>::zeros(g);
    let mut sum_sq = Array1::<f64>::zeros(g);
    for s in 0..num_samples {
        let mut rng = stream_rng(seed, Purpose::Prediction, s as u64, 1);
        let bundle = NoiseBundle::draw(params, 1, &mut rng);
        let alpha = sample_alpha_row(params, mode, entity, component, &bundle, 0)?;
        for (i, &t) in time_grid.iter().enumerate() {
            let u = params.gl_rule.synth_trajectory(&alpha, t);
            sum[i] += u;
            sum_sq[i] += u * u;
        }
    }
    let s_count = num_samples as f64;
    let mean = &sum / s_count;
    let std = Array1::from_shape_fn(g, |i| {
        (sum_sq[i] / s_count - mean[i] * mean[i]).max(0.0).sqrt()
    });
    Ok((mean, std))
}
