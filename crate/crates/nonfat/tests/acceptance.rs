//! Acceptance suite: one test per project acceptance criterion, each
//! printing a `criterion N: PASS/FAIL` line (run with `-- --nocapture` to
//! see the lines for passing tests too).
//!
//! Criteria 1–6 pin the numerical core against independent dense oracles
//! computed locally in this file. Criteria 7–8 drive the released binary
//! end to end on a synthetic dataset and share one trained model.
//! Criterion 9 — reference accuracies on external datasets — is
//! documentation-only and recorded in the README.

use ndarray::{Array1, Array2};
use nonfat::data::Observation;
use nonfat::data::TensorMeta;
use nonfat::gaussians::{
    cond_row_sample, cond_scalar_sample, kl_gaussian, kl_mg_prior, mg_logpdf, MatrixGaussian,
};
use nonfat::kernels::{chol_jitter, ProductKernel, SEKernel};
use nonfat::model::{elbo_estimate, init, NoiseBundle};
use nonfat::optim::{grad_check, tiny_gradcheck_model, TrainConfig};
use nonfat::quadrature::GLRule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;
use std::path::PathBuf;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

fn report(id: u32, pass: bool, detail: &str) {
    println!("criterion {id}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
}

// ---------------------------------------------------------------------------
// Local dense linear algebra (independent of the crate's internals)
// ---------------------------------------------------------------------------

fn chol(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                assert!(s > 0.0, "matrix not positive definite");
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    l
}

fn solve_lower(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        for j in 0..i {
            let xj = x[j];
            x[i] -= l[[i, j]] * xj;
        }
        x[i] /= l[[i, i]];
    }
    x
}

fn solve_lower_t(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        for j in (i + 1)..n {
            let xj = x[j];
            x[i] -= l[[j, i]] * xj;
        }
        x[i] /= l[[i, i]];
    }
    x
}

fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let l = chol(a);
    solve_lower_t(&l, &solve_lower(&l, b))
}

fn logdet_spd(a: &Array2<f64>) -> f64 {
    2.0 * chol(a).diag().iter().map(|d| d.ln()).sum::<f64>()
}

fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(i, j)| {
        a[[i / br, j / bc]] * b[[i % br, j % bc]]
    })
}

/// Column-major vectorization, matching the matrix-Gaussian convention
/// `vec(X) ~ N(vec(A), Σ_c ⊗ Σ_r)`.
fn vec_col(x: &Array2<f64>) -> Array1<f64> {
    let (n, m) = x.dim();
    Array1::from_iter((0..m).flat_map(move |j| (0..n).map(move |i| x[[i, j]])))
}

fn draw(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |_| StandardNormal.sample(rng))
}

/// Random lower-triangular factor with positive diagonal.
fn draw_lower(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let raw = draw(rng, n, n);
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..i {
            l[[i, j]] = raw[[i, j]];
        }
        l[[i, i]] = 0.4 + raw[[i, i]].abs();
    }
    l
}

/// Random well-conditioned SPD matrix.
fn draw_spd(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let w = draw(rng, n, n);
    let mut a = w.dot(&w.t());
    for i in 0..n {
        a[[i, i]] += 0.5;
    }
    a
}

fn factorial(p: usize) -> f64 {
    (1..=p).map(|i| i as f64).product()
}

// ---------------------------------------------------------------------------
// Criteria 1–6: numerical core against dense oracles
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_quadrature_moments() {
    let tic = Instant::now();
    let mut worst = 0.0f64;
    for order in 1..=20 {
        let rule = GLRule::new(order).unwrap();
        for p in 0..=(2 * order - 1) {
            let quad: f64 = rule
                .nodes()
                .iter()
                .zip(rule.weights().iter())
                .map(|(&x, &w)| w * x.powi(p as i32))
                .sum();
            let rel = (quad - factorial(p)).abs() / factorial(p);
            worst = worst.max(rel);
        }
    }
    // Order 2 in closed form: nodes 2∓√2, weights (2±√2)/4.
    let rule = GLRule::new(2).unwrap();
    let s2 = std::f64::consts::SQRT_2;
    let node_err = (rule.nodes()[0] - (2.0 - s2))
        .abs()
        .max((rule.nodes()[1] - (2.0 + s2)).abs());
    let weight_err = (rule.weights()[0] - (2.0 + s2) / 4.0)
        .abs()
        .max((rule.weights()[1] - (2.0 - s2) / 4.0).abs());
    let secs = tic.elapsed().as_secs_f64();
    let pass = worst < 1e-10 && node_err < 1e-9 && weight_err < 1e-9 && secs < 1.0;
    report(
        1,
        pass,
        &format!(
            "moment rel err {worst:.2e} (limit 1e-10), order-2 closed-form err \
             {:.2e} (limit 1e-9), {secs:.2}s (limit 1s)",
            node_err.max(weight_err)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_spectrum_synthesis() {
    let tic = Instant::now();
    let rule = GLRule::new(10).unwrap();
    let mut worst = 0.0f64;
    for &lam in &[0.5, 1.0, 2.0] {
        let alpha = Array1::from_iter(rule.nodes().iter().map(|&x| (-lam * x).exp()));
        for &t in &[0.0, 0.25, 0.5, 0.75, 1.0] {
            let got = rule.synth_trajectory(&alpha, t);
            let want = (1.0 / PI) * (1.0 + lam) / ((1.0 + lam).powi(2) + t * t);
            worst = worst.max((got - want).abs());
        }
    }
    let secs = tic.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 1.0;
    report(
        2,
        pass,
        &format!("synthesis abs err {worst:.2e} (limit 1e-4), {secs:.2}s (limit 1s)"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_matrix_gaussian_dense_equivalence() {
    let tic = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let jitter = 1e-9;
    let mut worst_logpdf = 0.0f64;
    let mut worst_kl = 0.0f64;
    for trial in 0..20 {
        let n = 1 + (trial % 4);
        let m = 1 + ((trial / 4) % 4);
        let a = draw(&mut rng, n, m);
        let l = draw_lower(&mut rng, n);
        let r = draw_lower(&mut rng, m);
        let x = draw(&mut rng, n, m);
        let q = MatrixGaussian::new(a.clone(), l.clone(), r.clone()).unwrap();

        // Dense vectorized Gaussian: vec(X) ~ N(vec(A), Σ_c ⊗ Σ_r).
        let sig_r = l.dot(&l.t());
        let sig_c = r.dot(&r.t());
        let sigma = kron(&sig_c, &sig_r);
        let d = &vec_col(&x) - &vec_col(&a);
        let quad = d.dot(&solve_spd(&sigma, &d));
        let nm = (n * m) as f64;
        let dense_logpdf = -0.5 * quad - 0.5 * nm * (2.0 * PI).ln() - 0.5 * logdet_spd(&sigma);
        worst_logpdf = worst_logpdf.max((mg_logpdf(x.view(), &q) - dense_logpdf).abs());

        // Dense KL against the Kronecker prior with matching jitter.
        let mut pr = draw_spd(&mut rng, n);
        let mut pc = draw_spd(&mut rng, m);
        let got_kl = kl_mg_prior(&q, pr.view(), pc.view(), jitter).unwrap();
        for i in 0..n {
            pr[[i, i]] += jitter;
        }
        for i in 0..m {
            pc[[i, i]] += jitter;
        }
        let prior = kron(&pc, &pr);
        let mu = vec_col(&a);
        let mut trace = 0.0;
        for j in 0..(n * m) {
            let col = sigma.column(j).to_owned();
            trace += solve_spd(&prior, &col)[j];
        }
        let mean_term = mu.dot(&solve_spd(&prior, &mu));
        let dense_kl =
            0.5 * (trace + mean_term - nm + logdet_spd(&prior) - logdet_spd(&sigma));
        worst_kl = worst_kl.max((got_kl - dense_kl).abs());
    }
    let secs = tic.elapsed().as_secs_f64();
    let pass = worst_logpdf < 1e-8 && worst_kl < 1e-8 && secs < 5.0;
    report(
        3,
        pass,
        &format!(
            "logpdf err {worst_logpdf:.2e}, KL err {worst_kl:.2e} (limits 1e-8), \
             {secs:.2}s (limit 5s)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_conditional_gaussian_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let jitter = 1e-8;
    let mut worst = 0.0f64;
    for &a_count in &[1usize, 2, 3] {
        // --- Row conditional under the product kernel ---
        let c = 2;
        let kernel = ProductKernel::new(SEKernel::new(0.3), SEKernel::new(-0.2), 2);
        let z = draw(&mut rng, a_count, 2);
        let e_j = draw(&mut rng, 1, 2);
        let g_hat = draw(&mut rng, a_count, c);
        let freq = GLRule::new(c).unwrap();
        let freq_pts =
            Array2::from_shape_fn((c, 1), |(i, _)| freq.nodes()[i]);
        let mut k_omega = kernel.freq_kernel.gram(freq_pts.view());
        for i in 0..c {
            k_omega[[i, i]] += jitter;
        }
        let k_omega_chol = chol(&k_omega);

        // Implementation: mean from the zero-noise run, covariance factor
        // from unit-noise perturbations.
        let run = |noise: &Array1<f64>| -> Array1<f64> {
            cond_row_sample(
                e_j.row(0),
                z.view(),
                g_hat.view(),
                &kernel,
                k_omega_chol.view(),
                noise.view(),
                jitter,
            )
            .unwrap()
        };
        let mean_got = run(&Array1::zeros(c));
        let mut spread = Array2::<f64>::zeros((c, c));
        for col in 0..c {
            let mut e = Array1::zeros(c);
            e[col] = 1.0;
            let diff = &run(&e) - &mean_got;
            for row in 0..c {
                spread[[row, col]] = diff[row];
            }
        }
        let cov_got = spread.dot(&spread.t());

        // Dense joint-Gaussian conditioning over the (a+1)·C grid.
        let mut k_e = kernel.embed_kernel.gram(z.view());
        for i in 0..a_count {
            k_e[[i, i]] += jitter;
        }
        let k_j = kernel.embed_kernel.cross(z.view(), e_j.view());
        let k_j = Array1::from_iter(k_j.column(0).iter().copied());
        let beta = solve_spd(&k_e, &k_j);
        let mean_dense = g_hat.t().dot(&beta);
        let schur = 1.0 - k_j.dot(&beta);
        let cov_dense = k_omega.mapv(|v| v * schur);

        for i in 0..c {
            worst = worst.max((mean_got[i] - mean_dense[i]).abs());
            for j in 0..c {
                worst = worst.max((cov_got[[i, j]] - cov_dense[[i, j]]).abs());
            }
        }

        // --- Scalar conditional under the plain kernel ---
        let kernel_g = SEKernel::new(0.1);
        let z_g = draw(&mut rng, a_count, 3);
        let v = draw(&mut rng, 1, 3);
        let h_hat = Array1::from_iter(draw(&mut rng, a_count, 1).column(0).iter().copied());
        let run_s = |noise: f64| -> f64 {
            cond_scalar_sample(
                v.row(0),
                z_g.view(),
                h_hat.view(),
                &kernel_g,
                noise,
                jitter,
            )
            .unwrap()
        };
        let mu_got = run_s(0.0);
        let sd_got = run_s(1.0) - mu_got;

        let mut k_g = kernel_g.gram(z_g.view());
        for i in 0..a_count {
            k_g[[i, i]] += jitter;
        }
        let k_v = kernel_g.cross(z_g.view(), v.view());
        let k_v = Array1::from_iter(k_v.column(0).iter().copied());
        let beta = solve_spd(&k_g, &k_v);
        let mu_dense = h_hat.dot(&beta);
        let var_dense = 1.0 - k_v.dot(&beta);
        worst = worst.max((mu_got - mu_dense).abs());
        worst = worst.max((sd_got * sd_got - var_dense).abs());
    }
    let pass = worst < 1e-10;
    report(
        4,
        pass,
        &format!("conditional mean/covariance err {worst:.2e} (limit 1e-10)"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_gradient_check() {
    let tic = Instant::now();
    let (params, batch) = tiny_gradcheck_model(0).unwrap();
    let rep = grad_check(&params, &batch, 1e-4, 0).unwrap();
    let secs = tic.elapsed().as_secs_f64();
    let pass = rep.max_rel_err <= 1e-4 && secs < 30.0;
    report(
        5,
        pass,
        &format!(
            "{} scalars, max rel err {:.2e} (limit 1e-4) at `{}`, {secs:.1}s (limit 30s)",
            rep.checked, rep.max_rel_err, rep.worst_param
        ),
    );
    assert!(pass, "{rep}");
}

/// Inverse of the factor parameterization: strict lower part kept,
/// diagonal stored as its logarithm.
fn raw_from_lower(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut raw = Array2::zeros((n, n));
    for i in 0..n {
        raw[[i, i]] = l[[i, i]].ln();
        for j in 0..i {
            raw[[i, j]] = l[[i, j]];
        }
    }
    raw
}

#[test]
fn criterion_6_degenerate_elbo() {
    // Posteriors set equal to their priors, unit noise variance, zero
    // sampling noise: both KL terms vanish and the likelihood term is the
    // closed-form sum over the batch.
    let meta = TensorMeta {
        num_modes: 2,
        dims: vec![3, 4],
        time_min: 0.0,
        time_max: 1.0,
    };
    let config = TrainConfig {
        rank: 2,
        quad_order: 3,
        embed_dim: 2,
        pseudo_freq: 3,
        pseudo_entry: 4,
        jitter: 1e-6,
        ..TrainConfig::default()
    };
    let mut params = init(&meta, &config, 5).unwrap();
    let c = params.quad_order();
    let freq_pts = Array2::from_shape_fn((c, 1), |(i, _)| params.gl_rule.nodes()[i]);
    let mut worst_kl = 0.0f64;
    for k in 0..2 {
        let z = params.pseudo_in_freq[k].clone();
        for r in 0..params.rank {
            let kernel = params.freq_kernel(k, r).clone();
            let gram_row = kernel.embed_kernel.gram(z.view());
            let gram_col = kernel.freq_kernel.gram(freq_pts.view());
            let (chol_row, _) = chol_jitter(&gram_row.view(), params.jitter).unwrap();
            let (chol_col, _) = chol_jitter(&gram_col.view(), params.jitter).unwrap();
            assert!(params.set_leaf(
                &format!("pseudo_out_freq.k{k}.r{r}.raw_row"),
                &raw_from_lower(&chol_row)
            ));
            assert!(params.set_leaf(
                &format!("pseudo_out_freq.k{k}.r{r}.raw_col"),
                &raw_from_lower(&chol_col)
            ));
            let q = params.posterior(k, r).unwrap();
            let kl = kl_mg_prior(&q, gram_row.view(), gram_col.view(), params.jitter).unwrap();
            worst_kl = worst_kl.max(kl.abs());
        }
    }
    let gram_g = params.kernel_entry.gram(params.pseudo_in_entry.view());
    let (chol_g, _) = chol_jitter(&gram_g.view(), params.jitter).unwrap();
    assert!(params.set_leaf("pseudo_out_entry.raw_chol", &raw_from_lower(&chol_g)));
    let q_h = params.entry_posterior().unwrap();
    worst_kl = worst_kl.max(
        kl_gaussian(&q_h, gram_g.view(), params.jitter)
            .unwrap()
            .abs(),
    );
    assert!(params.set_leaf("log_noise_var", &Array2::zeros((1, 1))));

    let batch = vec![
        Observation {
            indices: vec![0, 1],
            value: 0.3,
            time: 0.2,
        },
        Observation {
            indices: vec![2, 0],
            value: -0.8,
            time: 0.5,
        },
        Observation {
            indices: vec![1, 3],
            value: 1.1,
            time: 0.9,
        },
        Observation {
            indices: vec![0, 2],
            value: 0.0,
            time: 0.0,
        },
    ];
    let n_total = 10;
    let noise = NoiseBundle::zeros(&params, batch.len());
    let elbo = elbo_estimate(&params, &batch, n_total, &noise).unwrap();
    let weight = n_total as f64 / batch.len() as f64;
    let expected: f64 = weight
        * batch
            .iter()
            .map(|o| -0.5 * (2.0 * PI).ln() - 0.5 * o.value * o.value)
            .sum::<f64>();
    let elbo_err = (elbo - expected).abs();
    let pass = worst_kl < 1e-9 && elbo_err < 1e-9;
    report(
        6,
        pass,
        &format!("KL magnitude {worst_kl:.2e}, ELBO vs closed form {elbo_err:.2e} (limits 1e-9)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Criteria 7–8: end-to-end on the released binary, shared trained model
// ---------------------------------------------------------------------------

struct TrainedFixture {
    // Keeps the artifact directory alive for the whole test process.
    _dir: tempfile::TempDir,
    checkpoint: PathBuf,
    best_test_rmse: f64,
    rmse_limit: f64,
    elbo_smoothed_ok: bool,
    train_secs: f64,
    epochs: usize,
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nonfat"))
}

fn trained() -> &'static TrainedFixture {
    static FIXTURE: OnceLock<TrainedFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let out = binary()
            .args([
                "simulate",
                "--dims",
                "5,5",
                "--num-obs",
                "2000",
                "--noise",
                "0.1",
                "--seed",
                "0",
                "--components",
                "2",
                "--out",
            ])
            .arg(d.join("data.csv"))
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "simulate failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );

        std::fs::write(
            d.join("run.toml"),
            format!(
                "data = \"{}\"\nnum_modes = 2\ntrain_frac = 0.8\noutput_dir = \"{}\"\n\
                 [train]\nrank = 3\nquad_order = 10\npseudo_freq = 50\npseudo_entry = 50\n\
                 batch_size = 100\nlearning_rate = 1e-3\nepochs = 500\nseed = 0\n",
                d.join("data.csv").display(),
                d.join("out").display()
            ),
        )
        .unwrap();
        let tic = Instant::now();
        let out = binary()
            .arg("train")
            .arg(d.join("run.toml"))
            .output()
            .unwrap();
        let train_secs = tic.elapsed().as_secs_f64();
        assert!(
            out.status.success(),
            "train failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
        let best_test_rmse: f64 = stdout
            .lines()
            .find_map(|l| l.strip_prefix("test_rmse="))
            .and_then(|rest| rest.split_whitespace().next())
            .expect("summary line present")
            .parse()
            .unwrap();

        // The standardized noise floor: raw noise std over the raw value
        // std recorded by normalization.
        let ckpt_text = std::fs::read_to_string(d.join("out/checkpoint.json")).unwrap();
        let ckpt: serde_json::Value = serde_json::from_str(&ckpt_text).unwrap();
        let value_std = ckpt["norm_stats"]["value_std"].as_f64().unwrap();
        let rmse_limit = 1.5 * (0.1 / value_std);

        // Smoothed (window 20) ELBO must be non-decreasing over the first
        // half of training.
        let history = std::fs::read_to_string(d.join("out/history.csv")).unwrap();
        let elbo: Vec<f64> = history
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        let epochs = elbo.len();
        let window = 20;
        let half = epochs / 2;
        let smoothed: Vec<f64> = (0..half.saturating_sub(window))
            .map(|i| elbo[i..i + window].iter().sum::<f64>() / window as f64)
            .collect();
        let elbo_smoothed_ok = smoothed
            .windows(2)
            .all(|w| w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));

        TrainedFixture {
            checkpoint: d.join("out/checkpoint.json"),
            _dir: dir,
            best_test_rmse,
            rmse_limit,
            elbo_smoothed_ok,
            train_secs,
            epochs,
        }
    })
}

#[test]
fn criterion_7_synthetic_recovery() {
    let fx = trained();
    let rmse_ok = fx.best_test_rmse <= fx.rmse_limit;
    let time_ok = fx.train_secs < 900.0;
    let pass = rmse_ok && fx.elbo_smoothed_ok && time_ok && fx.epochs == 500;
    report(
        7,
        pass,
        &format!(
            "best test RMSE {:.4} vs limit {:.4} (1.5× standardized noise floor), \
             smoothed ELBO non-decreasing over first half: {}, {:.0}s (limit 900s)",
            fx.best_test_rmse, fx.rmse_limit, fx.elbo_smoothed_ok, fx.train_secs
        ),
    );
    assert!(
        pass,
        "end-to-end recovery unmet: RMSE {:.4} vs {:.4}; the optimizer spends this \
         epoch budget normalizing the large initial KL term before signal fitting \
         begins (see README, Known limitations)",
        fx.best_test_rmse, fx.rmse_limit
    );
}

#[test]
fn criterion_8_extrapolation_uncertainty() {
    let fx = trained();
    let dir = tempfile::tempdir().unwrap();
    let run_grid = |name: &str, t_min: f64, t_max: f64, points: usize| -> Vec<(f64, f64)> {
        let path = dir.path().join(name);
        let out = binary()
            .arg("trajectories")
            .arg(&fx.checkpoint)
            .args(["--mode", "0", "--entities", "0,1,2,3,4"])
            .args(["--t-min", &t_min.to_string(), "--t-max", &t_max.to_string()])
            .args(["--points", &points.to_string(), "--output"])
            .arg(&path)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "trajectories failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[4].parse().unwrap(), f[5].parse().unwrap())
            })
            .collect()
    };
    let in_range = run_grid("in.csv", 0.0, 1.0, 100);
    let extrap = run_grid("ex.csv", 1.0, 1.3, 40);

    let finite = extrap
        .iter()
        .all(|&(m, s)| m.is_finite() && s.is_finite() && s >= 0.0);
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let med_in = median(in_range.iter().map(|&(_, s)| s).collect());
    let med_ex = median(extrap.iter().map(|&(_, s)| s).collect());
    let ratio = med_ex / med_in;
    let pass = finite && ratio <= 10.0;
    report(
        8,
        pass,
        &format!(
            "extrapolation means/stds finite: {finite}, median std ratio \
             {ratio:.2} (limit 10×: in-range {med_in:.3e}, beyond-range {med_ex:.3e})"
        ),
    );
    assert!(pass);
}
