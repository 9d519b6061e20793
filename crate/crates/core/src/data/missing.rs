use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingKind {
    /// Cells removed i.i.d.
    Point,
    /// Sparse i.i.d. drops plus contiguous per-sensor outages.
    Block,
}

/// How many observed cells are hidden from the model during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhitenSpec {
    Fixed(f64),
    /// Rate drawn uniformly from the set, independently per window.
    Combined(Vec<f64>),
}

impl Default for WhitenSpec {
    fn default() -> Self {
        WhitenSpec::Fixed(0.25)
    }
}

impl WhitenSpec {
    pub fn combined_default() -> Self {
        WhitenSpec::Combined(vec![0.25, 0.5, 0.75])
    }

    pub fn validate(&self) -> Result<()> {
        let rates: &[f64] = match self {
            WhitenSpec::Fixed(r) => std::slice::from_ref(r),
            WhitenSpec::Combined(v) if v.is_empty() => {
                return Err(Error::Config("combined whitening set is empty".into()))
            }
            WhitenSpec::Combined(v) => v,
        };
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config(format!(
                "whitening rates must be in [0, 1], got {rates:?}"
            )));
        }
        Ok(())
    }

    pub fn sample_rate(&self, rng: &mut impl Rng) -> f64 {
        match self {
            WhitenSpec::Fixed(r) => *r,
            WhitenSpec::Combined(v) => v[rng.random_range(0..v.len())],
        }
    }

    /// True when every window would get an empty whitening mask.
    pub fn is_zero(&self) -> bool {
        match self {
            WhitenSpec::Fixed(r) => *r == 0.0,
            WhitenSpec::Combined(v) => v.iter().all(|&r| r == 0.0),
        }
    }
}

/// Declarative description of a missing-data simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissingPatternSpec {
    pub kind: MissingKind,
    /// Removal probability for point missing.
    pub point_rate: f64,
    /// I.i.d. removal probability applied before block failures.
    pub drop_rate: f64,
    /// Per-sensor, per-step probability that an outage starts.
    pub failure_prob: f64,
    /// Inclusive bounds of the outage duration in steps.
    pub duration: (usize, usize),
    pub whiten: WhitenSpec,
    pub seed: u64,
}

impl Default for MissingPatternSpec {
    fn default() -> Self {
        Self {
            kind: MissingKind::Point,
            point_rate: 0.25,
            drop_rate: 0.05,
            failure_prob: 0.0015,
            duration: (12, 48),
            whiten: WhitenSpec::default(),
            seed: 0,
        }
    }
}

impl MissingPatternSpec {
    pub fn point(rate: f64, seed: u64) -> Self {
        Self {
            kind: MissingKind::Point,
            point_rate: rate,
            seed,
            ..Self::default()
        }
    }

    pub fn block(seed: u64) -> Self {
        Self {
            kind: MissingKind::Block,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("point_rate", self.point_rate),
            ("drop_rate", self.drop_rate),
            ("failure_prob", self.failure_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        let (lo, hi) = self.duration;
        if lo < 1 || lo > hi {
            return Err(Error::Config(format!(
                "duration bounds must satisfy 1 <= lo <= hi, got ({lo}, {hi})"
            )));
        }
        self.whiten.validate()
    }
}

/// Simulates the observation mask (1 = observed) over the whole series.
/// Cells without ground truth are never observed.
///
/// Block mode unions an i.i.d. drop at `drop_rate` with outages: for every
/// sensor and step an outage of `U(lo, hi)` steps starts with probability
/// `failure_prob`; overlapping outages merge.
pub fn apply_missing(ds: &Dataset, spec: &MissingPatternSpec) -> Result<Tensor> {
    spec.validate()?;
    let (n, steps) = (ds.n_nodes(), ds.n_steps());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut obs = ds.available.clone();
    match spec.kind {
        MissingKind::Point => {
            for v in obs.data_mut() {
                if rng.random_bool(spec.point_rate) {
                    *v = 0.0;
                }
            }
        }
        MissingKind::Block => {
            for v in obs.data_mut() {
                if rng.random_bool(spec.drop_rate) {
                    *v = 0.0;
                }
            }
            let (lo, hi) = spec.duration;
            for i in 0..n {
                for t in 0..steps {
                    if rng.random_bool(spec.failure_prob) {
                        let len = rng.random_range(lo..=hi);
                        for s in t..(t + len).min(steps) {
                            obs.set(i, s, 0.0);
                        }
                    }
                }
            }
        }
    }
    Ok(obs)
}
