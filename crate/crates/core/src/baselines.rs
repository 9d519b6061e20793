//! Reference imputers: per-sensor mean, temporal linear interpolation and
//! alternating-least-squares matrix factorization. Inputs are `[N, T]`
//! matrices with a binary observation mask; observed cells are always
//! copied through unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{pseudo_inverse, svd_values};
use crate::tensor::Tensor;
use crate::training::splice;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BaselineKind {
    Mean,
    LinearInterp,
    AlsMf(AlsConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlsConfig {
    pub rank: usize,
    pub reg: f64,
    pub iters: usize,
    #[serde(default)]
    pub seed: u64,
}

impl AlsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.iters == 0 || !(self.reg >= 0.0) {
            return Err(Error::Config(format!(
                "als needs rank >= 1, iters >= 1, reg >= 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Runs any baseline and returns the spliced completion.
pub fn run_baseline(kind: &BaselineKind, values: &Tensor, obs: &Tensor) -> Result<Tensor> {
    match kind {
        BaselineKind::Mean => impute_mean(values, obs),
        BaselineKind::LinearInterp => impute_linear(values, obs),
        BaselineKind::AlsMf(c) => impute_als(values, obs, c).map(|r| r.imputed),
    }
}

fn check(values: &Tensor, obs: &Tensor) -> Result<(usize, usize)> {
    let dims = values.dims2()?;
    if obs.shape() != values.shape() {
        return Err(Error::shape("baseline", values.shape(), obs.shape()));
    }
    Ok(dims)
}

/// Per-sensor observed means; sensors without observations get the global
/// observed mean.
fn sensor_means(values: &Tensor, obs: &Tensor) -> Result<Vec<f64>> {
    let (n, t) = check(values, obs)?;
    let (mut total, mut count) = (0.0, 0usize);
    let mut means: Vec<Option<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let (mut s, mut c) = (0.0, 0usize);
        for j in 0..t {
            if obs.at(i, j) != 0.0 {
                s += values.at(i, j);
                c += 1;
            }
        }
        total += s;
        count += c;
        means.push((c > 0).then(|| s / c as f64));
    }
    if count == 0 {
        return Err(Error::Contract("no observed cells to impute from".into()));
    }
    let global = total / count as f64;
    Ok(means.into_iter().map(|m| m.unwrap_or(global)).collect())
}

/// Each missing cell gets its sensor's observed mean.
pub fn impute_mean(values: &Tensor, obs: &Tensor) -> Result<Tensor> {
    let means = sensor_means(values, obs)?;
    let t = values.shape()[1];
    let fill = Tensor::from_fn(values.shape(), |i| means[i / t]);
    Ok(splice(&fill, values, obs))
}

/// Linear interpolation in time between the nearest observed neighbours;
/// leading and trailing gaps take the nearest observed value.
pub fn impute_linear(values: &Tensor, obs: &Tensor) -> Result<Tensor> {
    let (n, t) = check(values, obs)?;
    let means = sensor_means(values, obs)?;
    let mut out = values.clone();
    for i in 0..n {
        let seen: Vec<usize> = (0..t).filter(|&j| obs.at(i, j) != 0.0).collect();
        if seen.is_empty() {
            for j in 0..t {
                out.set(i, j, means[i]);
            }
            continue;
        }
        let mut k = 0;
        for j in 0..t {
            if obs.at(i, j) != 0.0 {
                continue;
            }
            while k + 1 < seen.len() && seen[k + 1] < j {
                k += 1;
            }
            let v = if j < seen[0] {
                values.at(i, seen[0])
            } else if j > *seen.last().unwrap() {
                values.at(i, *seen.last().unwrap())
            } else {
                let (a, b) = (seen[k], seen[k + 1]);
                let w = (j - a) as f64 / (b - a) as f64;
                (1.0 - w) * values.at(i, a) + w * values.at(i, b)
            };
            out.set(i, j, v);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlsResult {
    /// `U·Vᵀ` spliced with the observations.
    pub imputed: Tensor,
    /// The unspliced low-rank reconstruction `U·Vᵀ`.
    pub low_rank: Tensor,
    pub u: Tensor,
    pub v: Tensor,
    /// Objective after initialization and after every half-step.
    pub objective: Vec<f64>,
}

fn objective(values: &Tensor, obs: &Tensor, u: &Tensor, v: &Tensor, reg: f64) -> Result<f64> {
    let fit = u.matmul(&v.t()?)?;
    let mut loss = 0.0;
    for ((f, x), m) in fit.data().iter().zip(values.data()).zip(obs.data()) {
        if *m != 0.0 {
            loss += (x - f).powi(2);
        }
    }
    let norms = u.data().iter().chain(v.data()).map(|a| a * a).sum::<f64>();
    Ok(loss + reg * norms)
}

/// Solves the ridge problems for every row of `target` given fixed
/// `other`. Row `i` of the result minimizes
/// `Σ_{j ∈ Ω_i} (x_ij − a·other_j)² + reg‖a‖²`.
fn ridge_rows(
    values: &Tensor,
    obs: &Tensor,
    other: &Tensor,
    reg: f64,
    transpose: bool,
) -> Result<Tensor> {
    let (rows, cols) = if transpose {
        (values.shape()[1], values.shape()[0])
    } else {
        (values.shape()[0], values.shape()[1])
    };
    let r = other.shape()[1];
    let get = |m: &Tensor, i: usize, j: usize| if transpose { m.at(j, i) } else { m.at(i, j) };
    let mut out = Tensor::zeros(&[rows, r]);
    for i in 0..rows {
        let mut a = Tensor::zeros(&[r, r]);
        let mut b = vec![0.0; r];
        for j in 0..cols {
            if get(obs, i, j) == 0.0 {
                continue;
            }
            let x = get(values, i, j);
            let o = other.row(j);
            for p in 0..r {
                b[p] += o[p] * x;
                for q in 0..r {
                    let cur = a.at(p, q);
                    a.set(p, q, cur + o[p] * o[q]);
                }
            }
        }
        for p in 0..r {
            let cur = a.at(p, p);
            a.set(p, p, cur + reg);
        }
        let sv = svd_values(&a)?.values;
        let top = sv.first().copied().unwrap_or(0.0);
        let low = sv.last().copied().unwrap_or(0.0);
        if top == 0.0 || low <= 1e-12 * top {
            return Err(Error::Numeric(format!(
                "ridge system for {} {i} is singular (too few observations for rank {r}); use reg > 0",
                if transpose { "step" } else { "sensor" }
            )));
        }
        let inv = pseudo_inverse(&a, 1e-14)?;
        for p in 0..r {
            let v: f64 = (0..r).map(|q| inv.at(p, q) * b[q]).sum();
            out.set(i, p, v);
        }
    }
    Ok(out)
}

/// Minimizes `‖M⊙(X − UVᵀ)‖²_F + reg(‖U‖²_F + ‖V‖²_F)` by alternating exact
/// ridge solves for `U` and `V`.
pub fn impute_als(values: &Tensor, obs: &Tensor, cfg: &AlsConfig) -> Result<AlsResult> {
    cfg.validate()?;
    let (n, t) = check(values, obs)?;
    if cfg.rank > n.min(t) {
        return Err(Error::Config(format!(
            "als rank {} exceeds min(N, T) = {}",
            cfg.rank,
            n.min(t)
        )));
    }
    if obs.data().iter().all(|&m| m == 0.0) {
        return Err(Error::Contract("no observed cells to impute from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (cfg.rank as f64).sqrt();
    let normal = Normal::new(0.0, scale).expect("positive scale");
    let mut u = Tensor::from_fn(&[n, cfg.rank], |_| normal.sample(&mut rng));
    let mut v = Tensor::from_fn(&[t, cfg.rank], |_| normal.sample(&mut rng));
    let mut history = vec![objective(values, obs, &u, &v, cfg.reg)?];
    for _ in 0..cfg.iters {
        u = ridge_rows(values, obs, &v, cfg.reg, false)?;
        history.push(objective(values, obs, &u, &v, cfg.reg)?);
        v = ridge_rows(values, obs, &u, cfg.reg, true)?;
        history.push(objective(values, obs, &u, &v, cfg.reg)?);
    }
    let low_rank = u.matmul(&v.t()?)?;
    Ok(AlsResult {
        imputed: splice(&low_rank, values, obs),
        low_rank,
        u,
        v,
        objective: history,
    })
}
