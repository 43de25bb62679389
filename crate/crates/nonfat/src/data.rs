//! Observation data model: CSV ingestion, train/test splitting,
//! standardization, mini-batching, and a synthetic-data generator with
//! known ground truth.
//!
//! Values are z-scored with statistics of the training split only, and
//! timestamps are mapped affinely so the training time range becomes
//! `[0, 1]` (test times may land outside it). Keeping times near the unit
//! interval matters for accuracy: the Gauss-Laguerre cosine synthesis uses
//! frequencies up to ω ≈ 30 at the default order, and its error bound
//! degrades rapidly once `|ω·t|` grows past the node range.

use crate::error::{Error, Result};
use crate::seeding::{stream_rng, Purpose};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

/// One observed tensor entry: per-mode entity ids, the measured value, and
/// its timestamp (both in raw units until normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub indices: Vec<usize>,
    pub value: f64,
    pub time: f64,
}

/// Shape of the observed tensor plus the time range of its observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub num_modes: usize,
    pub dims: Vec<usize>,
    pub time_min: f64,
    pub time_max: f64,
}

/// A set of observations with shared shape metadata. `value_mean` and
/// `value_std` are populated once the dataset has been standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: TensorMeta,
    pub observations: Vec<Observation>,
    pub value_mean: Option<f64>,
    pub value_std: Option<f64>,
}

/// The affine maps applied by [`normalize`], kept so predictions can be
/// reported in raw units: `value_raw = z·value_std + value_mean`,
/// `time_unit = (t_raw − time_min)/(time_max − time_min)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub value_mean: f64,
    pub value_std: f64,
    pub time_min: f64,
    pub time_max: f64,
}

impl NormStats {
    fn time_scale(&self) -> f64 {
        let range = self.time_max - self.time_min;
        // A single-instant training set maps every time to 0.
        if range > 0.0 {
            range
        } else {
            1.0
        }
    }

    pub fn apply_value(&self, raw: f64) -> f64 {
        (raw - self.value_mean) / self.value_std
    }

    pub fn invert_value(&self, z: f64) -> f64 {
        z * self.value_std + self.value_mean
    }

    pub fn apply_time(&self, raw: f64) -> f64 {
        (raw - self.time_min) / self.time_scale()
    }

    pub fn invert_time(&self, unit: f64) -> f64 {
        unit * self.time_scale() + self.time_min
    }
}

impl Dataset {
    /// Wraps observations with metadata, validating index ranges and
    /// finiteness.
    pub fn new(meta: TensorMeta, observations: Vec<Observation>) -> Result<Self> {
        if meta.num_modes == 0 || meta.dims.len() != meta.num_modes {
            return Err(Error::Data(format!(
                "metadata declares {} modes but {} dimensions",
                meta.num_modes,
                meta.dims.len()
            )));
        }
        if meta.dims.iter().any(|&d| d == 0) {
            return Err(Error::Data("every mode must have at least one entity".into()));
        }
        for (n, obs) in observations.iter().enumerate() {
            if obs.indices.len() != meta.num_modes {
                return Err(Error::Data(format!(
                    "observation {n} has {} indices, expected {}",
                    obs.indices.len(),
                    meta.num_modes
                )));
            }
            for (k, (&i, &d)) in obs.indices.iter().zip(meta.dims.iter()).enumerate() {
                if i >= d {
                    return Err(Error::Data(format!(
                        "observation {n}: index {i} out of range for mode {k} (dimension {d})"
                    )));
                }
            }
            if !obs.value.is_finite() || !obs.time.is_finite() {
                return Err(Error::Data(format!(
                    "observation {n} has non-finite value or time"
                )));
            }
        }
        Ok(Dataset {
            meta,
            observations,
            value_mean: None,
            value_std: None,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

fn meta_from_observations(num_modes: usize, dims: Vec<usize>, obs: &[Observation]) -> TensorMeta {
    let mut time_min = f64::INFINITY;
    let mut time_max = f64::NEG_INFINITY;
    for o in obs {
        time_min = time_min.min(o.time);
        time_max = time_max.max(o.time);
    }
    if obs.is_empty() {
        time_min = 0.0;
        time_max = 0.0;
    }
    TensorMeta {
        num_modes,
        dims,
        time_min,
        time_max,
    }
}

/// Loads observations from a CSV file with header `i1,...,iK,value,time`.
/// Mode dimensions are inferred as the per-mode maximum index plus one.
pub fn load_csv(path: &Path, num_modes: usize) -> Result<Dataset> {
    if num_modes == 0 {
        return Err(Error::Usage("number of modes must be at least 1".into()));
    }
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        msg: "file is empty, expected a header row".into(),
    })?;
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    let mut expected: Vec<String> = (1..=num_modes).map(|k| format!("i{k}")).collect();
    expected.push("value".into());
    expected.push("time".into());
    if fields != expected {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "header must be `{}`, found `{}`",
                expected.join(","),
                header.trim()
            ),
        });
    }
    let mut observations = Vec::new();
    let mut dims = vec![0usize; num_modes];
    for (idx, raw_line) in lines {
        let line = idx + 1; // 1-based, including the header
        if raw_line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw_line.split(',').map(str::trim).collect();
        if cols.len() != num_modes + 2 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", num_modes + 2, cols.len()),
            });
        }
        let mut indices = Vec::with_capacity(num_modes);
        for (k, col) in cols[..num_modes].iter().enumerate() {
            let i: i64 = col.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("mode-{} index `{col}` is not an integer", k + 1),
            })?;
            if i < 0 {
                return Err(Error::Parse {
                    line,
                    msg: format!("mode-{} index {i} is negative", k + 1),
                });
            }
            indices.push(i as usize);
            dims[k] = dims[k].max(i as usize + 1);
        }
        let value: f64 = cols[num_modes].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("value `{}` is not a number", cols[num_modes]),
        })?;
        let time: f64 = cols[num_modes + 1].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("time `{}` is not a number", cols[num_modes + 1]),
        })?;
        if !value.is_finite() || !time.is_finite() {
            return Err(Error::Parse {
                line,
                msg: "value and time must be finite".into(),
            });
        }
        observations.push(Observation {
            indices,
            value,
            time,
        });
    }
    if observations.is_empty() {
        return Err(Error::Data("no observations".into()));
    }
    let meta = meta_from_observations(num_modes, dims, &observations);
    Dataset::new(meta, observations)
}

/// Splits a dataset into disjoint train/test parts of sizes
/// `⌊N·train_frac⌋` and the remainder, uniformly at random but
/// deterministic in the seed.
pub fn split(d: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Usage(format!(
            "train fraction must lie strictly between 0 and 1, got {train_frac}"
        )));
    }
    if d.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let n = d.len();
    let n_train = (n as f64 * train_frac).floor() as usize;
    if n_train == 0 {
        return Err(Error::Data(format!(
            "train split is empty ({n} observations at fraction {train_frac})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, Purpose::Split, 0, 0);
    order.shuffle(&mut rng);
    let pick = |ids: &[usize]| -> Vec<Observation> {
        ids.iter().map(|&i| d.observations[i].clone()).collect()
    };
    let train_obs = pick(&order[..n_train]);
    let test_obs = pick(&order[n_train..]);
    let mut train = Dataset::new(d.meta.clone(), train_obs)?;
    let mut test = Dataset::new(d.meta.clone(), test_obs)?;
    // Both halves keep the metadata of the full dataset.
    train.meta = d.meta.clone();
    test.meta = d.meta.clone();
    Ok((train, test))
}

/// Standardizes both splits with training statistics: values are z-scored
/// (population standard deviation), times mapped so the training range
/// becomes `[0, 1]`. Test observations use the same maps, so their times
/// may fall outside the unit interval.
pub fn normalize(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, NormStats)> {
    if train.is_empty() {
        return Err(Error::Data("cannot normalize an empty training set".into()));
    }
    let n = train.len() as f64;
    let mean = train.observations.iter().map(|o| o.value).sum::<f64>() / n;
    let var = train
        .observations
        .iter()
        .map(|o| (o.value - mean).powi(2))
        .sum::<f64>()
        / n;
    if var <= 0.0 {
        return Err(Error::Data(
            "zero variance: training values are all identical".into(),
        ));
    }
    let mut time_min = f64::INFINITY;
    let mut time_max = f64::NEG_INFINITY;
    for o in &train.observations {
        time_min = time_min.min(o.time);
        time_max = time_max.max(o.time);
    }
    let stats = NormStats {
        value_mean: mean,
        value_std: var.sqrt(),
        time_min,
        time_max,
    };
    let transform = |d: &Dataset| -> Result<Dataset> {
        let obs: Vec<Observation> = d
            .observations
            .iter()
            .map(|o| Observation {
                indices: o.indices.clone(),
                value: stats.apply_value(o.value),
                time: stats.apply_time(o.time),
            })
            .collect();
        let meta = meta_from_observations(d.meta.num_modes, d.meta.dims.clone(), &obs);
        let mut out = Dataset::new(meta, obs)?;
        out.value_mean = Some(stats.value_mean);
        out.value_std = Some(stats.value_std);
        Ok(out)
    };
    Ok((transform(train)?, transform(test)?, stats))
}

/// Chunks a fresh random permutation of `0..N` into batches of
/// `batch_size` (the last may be short). Deterministic in `(seed, epoch)`.
pub fn minibatch_iter(d: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..d.len()).collect();
    let mut rng = stream_rng(seed, Purpose::Shuffle, epoch as u64, 0);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Generating scenario for [`synth_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SynthScenario {
    /// CP-style ground truth: per entity and component, a sinusoid
    /// `a·sin(2π f t + φ) + b`; the entry value sums, over components, the
    /// product of trajectories across modes.
    CpSin { components: usize },
}

/// Coefficients of one sinusoidal trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinCoeff {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub offset: f64,
}

impl SinCoeff {
    fn eval(&self, t: f64) -> f64 {
        self.amplitude * (2.0 * PI * self.frequency * t + self.phase).sin() + self.offset
    }
}

/// The noiseless generating function behind a synthetic dataset:
/// `coeffs[k][j][r]` holds the trajectory of entity `j` in mode `k`,
/// component `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub dims: Vec<usize>,
    pub components: usize,
    pub coeffs: Vec<Vec<Vec<SinCoeff>>>,
}

impl GroundTruth {
    /// Noiseless entry value at `(indices, t)`.
    pub fn eval(&self, indices: &[usize], t: f64) -> f64 {
        assert_eq!(indices.len(), self.dims.len(), "index count mismatch");
        let mut total = 0.0;
        for r in 0..self.components {
            let mut prod = 1.0;
            for (k, &j) in indices.iter().enumerate() {
                prod *= self.coeffs[k][j][r].eval(t);
            }
            total += prod;
        }
        total
    }

    /// The trajectory of one entity: mode `k`, entity `j`, component `r`.
    pub fn trajectory(&self, k: usize, j: usize, r: usize, t: f64) -> f64 {
        self.coeffs[k][j][r].eval(t)
    }
}

/// Generates a synthetic dataset of `num_obs` uniformly sampled entries and
/// timestamps in `[0, 1]`, with values from smooth known trajectories plus
/// Gaussian noise. Deterministic in the seed.
pub fn synth_dataset(
    dims: &[usize],
    num_obs: usize,
    noise_std: f64,
    seed: u64,
    scenario: SynthScenario,
) -> (Dataset, GroundTruth) {
    assert!(!dims.is_empty() && dims.iter().all(|&d| d > 0), "invalid dims");
    assert!(num_obs >= 1, "need at least one observation");
    assert!(noise_std >= 0.0 && noise_std.is_finite(), "invalid noise std");
    let SynthScenario::CpSin { components } = scenario;
    assert!(components >= 1, "need at least one component");
    let mut rng = stream_rng(seed, Purpose::Synth, 0, 0);
    // Low frequencies keep trajectories smooth over the unit interval, so
    // moderate observation counts pin them down.
    let coeffs: Vec<Vec<Vec<SinCoeff>>> = dims
        .iter()
        .map(|&d| {
            (0..d)
                .map(|_| {
                    (0..components)
                        .map(|_| SinCoeff {
                            amplitude: rng.random_range(0.5..1.5),
                            frequency: rng.random_range(0.25..1.0),
                            phase: rng.random_range(0.0..2.0 * PI),
                            offset: rng.random_range(-0.5..0.5),
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let truth = GroundTruth {
        dims: dims.to_vec(),
        components,
        coeffs,
    };
    let mut observations = Vec::with_capacity(num_obs);
    for _ in 0..num_obs {
        let indices: Vec<usize> = dims.iter().map(|&d| rng.random_range(0..d)).collect();
        let time: f64 = rng.random_range(0.0..1.0);
        let noise: f64 = StandardNormal.sample(&mut rng);
        let value = truth.eval(&indices, time) + noise_std * noise;
        observations.push(Observation {
            indices,
            value,
            time,
        });
    }
    let meta = meta_from_observations(dims.len(), dims.to_vec(), &observations);
    let dataset = Dataset::new(meta, observations).expect("generated data is valid");
    (dataset, truth)
}
