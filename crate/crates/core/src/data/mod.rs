//! Datasets, synthetic generation, missing-pattern simulation, windowing
//! and CSV I/O.

mod io;
mod missing;
mod window;

pub use io::{load_csv, load_mask_csv, save_csv, save_mask_csv};
pub use missing::{apply_missing, MissingKind, MissingPatternSpec, WhitenSpec};
pub use window::{make_windows, SpatioTemporalWindow};

use std::f64::consts::PI;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A multivariate series stored node-major as `[N, steps]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Values, 0 where no ground truth exists.
    pub values: Tensor,
    /// 1 where the cell has ground truth, 0 otherwise.
    pub available: Tensor,
    pub sensor_ids: Vec<String>,
    /// Absolute index of the first step; step `s` has time-of-day
    /// `(first_step + s) mod steps_per_day`.
    pub first_step: usize,
    pub steps_per_day: usize,
}

impl Dataset {
    pub fn new(values: Tensor, available: Tensor, steps_per_day: usize) -> Result<Self> {
        let (n, _) = values.dims2()?;
        if available.shape() != values.shape() {
            return Err(Error::shape(
                "Dataset::new",
                values.shape(),
                available.shape(),
            ));
        }
        if steps_per_day == 0 {
            return Err(Error::contract("steps_per_day must be at least 1"));
        }
        Ok(Self {
            values,
            available,
            sensor_ids: (0..n).map(|i| format!("s{i}")).collect(),
            first_step: 0,
            steps_per_day,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_steps(&self) -> usize {
        self.values.shape()[1]
    }

    /// Columns `range` of the series, keeping absolute time.
    pub fn slice_steps(&self, range: Range<usize>) -> Result<Self> {
        Ok(Self {
            values: slice_cols(&self.values, range.clone())?,
            available: slice_cols(&self.available, range.clone())?,
            sensor_ids: self.sensor_ids.clone(),
            first_step: self.first_step + range.start,
            steps_per_day: self.steps_per_day,
        })
    }
}

/// Columns `range` of a 2-D tensor.
pub fn slice_cols(m: &Tensor, range: Range<usize>) -> Result<Tensor> {
    let (r, c) = m.dims2()?;
    if range.start > range.end || range.end > c {
        return Err(Error::contract(format!(
            "column range {range:?} outside 0..{c}"
        )));
    }
    let w = range.len();
    let mut data = Vec::with_capacity(r * w);
    for i in 0..r {
        data.extend_from_slice(&m.row(i)[range.clone()]);
    }
    Tensor::new(vec![r, w], data)
}

/// Per-sensor standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits mean and standard deviation of each sensor over the cells marked
    /// in `mask` only. Sensors with zero spread get `std = 1`.
    pub fn fit(values: &Tensor, mask: &Tensor) -> Result<Self> {
        let (n, steps) = values.dims2()?;
        if mask.shape() != values.shape() {
            return Err(Error::shape(
                "Normalizer::fit",
                values.shape(),
                mask.shape(),
            ));
        }
        let mut mean = vec![0.0; n];
        let mut std = vec![1.0; n];
        for i in 0..n {
            let obs: Vec<f64> = (0..steps)
                .filter(|&t| mask.at(i, t) != 0.0)
                .map(|t| values.at(i, t))
                .collect();
            if obs.is_empty() {
                log::warn!("sensor {i} has no observed cells; using mean 0, std 1");
                continue;
            }
            let m = obs.iter().sum::<f64>() / obs.len() as f64;
            let var = obs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / obs.len() as f64;
            mean[i] = m;
            if var > 0.0 {
                std[i] = var.sqrt();
            } else {
                log::warn!("sensor {i} is constant over observed cells; using std 1");
            }
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, values: &Tensor) -> Tensor {
        let t = values.shape()[1];
        Tensor::from_fn(values.shape(), |idx| {
            let i = idx / t;
            (values.data()[idx] - self.mean[i]) / self.std[i]
        })
    }

    pub fn denormalize(&self, values: &Tensor) -> Tensor {
        let t = values.shape()[1];
        Tensor::from_fn(values.shape(), |idx| {
            let i = idx / t;
            values.data()[idx] * self.std[i] + self.mean[i]
        })
    }
}

/// Fractions of the series assigned to train, validation and test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    /// Contiguous, disjoint step ranges in time order.
    pub fn ranges(&self, steps: usize) -> Result<[Range<usize>; 3]> {
        let total = self.train + self.val + self.test;
        if [self.train, self.val, self.test].iter().any(|&r| r < 0.0) || (total - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split ratios must be non-negative and sum to 1, got {self:?}"
            )));
        }
        let a = (steps as f64 * self.train).round() as usize;
        let b = ((steps as f64 * (self.train + self.val)).round() as usize).min(steps);
        Ok([0..a, a..b, b..steps])
    }
}

/// Parameters of [`synth_lowrank`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub nodes: usize,
    pub steps: usize,
    pub rank: usize,
    /// Noise standard deviation as a fraction of the clean signal's standard
    /// deviation.
    pub noise: f64,
    pub steps_per_day: usize,
    pub seed: u64,
}

/// Low-rank periodic data `U·Vᵀ + noise`.
///
/// `V` holds `rank` temporal factors: a constant level plus sinusoids at the
/// first `rank − 1` harmonics of the daily cycle, each with a random phase.
/// `U` is an `N×rank` standard-normal loading matrix. With `noise = 0` the
/// result has rank at most `rank`.
pub fn synth_lowrank(spec: &SynthSpec) -> Result<Dataset> {
    let SynthSpec {
        nodes,
        steps,
        rank,
        noise,
        steps_per_day,
        seed,
    } = *spec;
    if rank == 0 || rank > nodes.min(steps) {
        return Err(Error::contract(format!(
            "rank {rank} must be in 1..={}",
            nodes.min(steps)
        )));
    }
    if !(noise >= 0.0) {
        return Err(Error::contract("noise must be non-negative"));
    }
    if steps_per_day == 0 {
        return Err(Error::contract("steps_per_day must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loadings: Vec<f64> = (0..nodes * rank)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let phases: Vec<f64> = (0..rank).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let factor = |j: usize, t: usize| -> f64 {
        if j == 0 {
            1.0
        } else {
            let w = 2.0 * PI * j as f64 / steps_per_day as f64;
            (w * t as f64 + phases[j]).sin()
        }
    };
    let mut clean = Tensor::zeros(&[nodes, steps]);
    for i in 0..nodes {
        for t in 0..steps {
            let v: f64 = (0..rank)
                .map(|j| loadings[i * rank + j] * factor(j, t))
                .sum();
            clean.set(i, t, v);
        }
    }
    let values = if noise > 0.0 {
        let mean = clean.sum() / clean.len() as f64;
        let sd = (clean.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / clean.len() as f64)
            .sqrt();
        let sigma = noise * sd;
        let mut noisy = clean;
        for v in noisy.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
        noisy
    } else {
        clean
    };
    let available = Tensor::ones(&[nodes, steps]);
    Dataset::new(values, available, steps_per_day)
}
