#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stimpute::model::{BoundParams, ModelConfig, ModelParams};
use stimpute::{Graph, Tensor, Var};

pub const H: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Relative error with a small floor so vanishing gradients compare on an
/// absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Outcome of a finite-difference probe.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_err(&self) -> f64 {
        rel_err(self.analytic, self.numeric)
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences at `probes` random coordinates of `inputs`.
pub fn grad_probes<F>(inputs: &[Tensor], probes: usize, seed: u64, f: F) -> Vec<Probe>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).expect("scalar output");

    let mut r = rng(seed);
    let mut result = Vec::with_capacity(probes);
    for _ in 0..probes {
        let input = r.random_range(0..inputs.len());
        let index = r.random_range(0..inputs[input].len());
        let analytic = grads.get(vars[input]).map_or(0.0, |t| t.data()[index]);
        let mut xs = inputs.to_vec();
        xs[input].data_mut()[index] += H;
        let up = eval(&xs);
        xs[input].data_mut()[index] -= 2.0 * H;
        let down = eval(&xs);
        result.push(Probe {
            input,
            index,
            analytic,
            numeric: (up - down) / (2.0 * H),
        });
    }
    result
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights so every
/// output element influences the gradient.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let w = randn(&shape, &mut rng(seed));
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

pub fn max_rel_err(probes: &[Probe]) -> f64 {
    probes.iter().map(Probe::rel_err).fold(0.0, f64::max)
}

/// Naive `O(n²)` one-dimensional DFT, `Σ_t x_t e^{-2πi kt/n}`.
pub fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let n = x.len();
    (0..n)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let a = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            (re, im)
        })
        .collect()
}

/// Naive 2-D DFT of an `[n, t]` matrix, row-major moduli.
pub fn naive_dft2_moduli(m: &Tensor) -> Vec<f64> {
    let (n, t) = m.dims2().unwrap();
    let mut out = Vec::with_capacity(n * t);
    for k in 0..n {
        for l in 0..t {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..t {
                    let a = -2.0
                        * std::f64::consts::PI
                        * ((k * i) as f64 / n as f64 + (l * j) as f64 / t as f64);
                    re += m.at(i, j) * a.cos();
                    im += m.at(i, j) * a.sin();
                }
            }
            out.push(re.hypot(im));
        }
    }
    out
}

/// A small model with the requested sizes and randomized (non-default)
/// parameters so layer norms and biases are exercised.
pub fn small_model(n: usize, t: usize, seed: u64) -> (ModelConfig, ModelParams) {
    let cfg = ModelConfig::tiny(n, t);
    let params = random_params(&cfg, seed);
    (cfg, params)
}

pub fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut r = rng(seed);
    let mut p = ModelParams::init(cfg, &mut r).unwrap();
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += 0.3 * r.random_range(-1.0..1.0);
        }
    }
    p
}

pub fn random_mask(shape: &[usize], keep: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| if r.random_bool(keep) { 1.0 } else { 0.0 })
}

/// Runs `f` with the parameters of a [`small_model`] as graph inputs, in
/// name order, and probes the gradient with respect to them.
pub fn model_probes<F>(n: usize, t: usize, seed: u64, probes: usize, f: F) -> Vec<Probe>
where
    F: Fn(&mut Graph, &ModelConfig, &BoundParams) -> Var,
{
    let (cfg, params) = small_model(n, t, seed);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    grad_probes(&inputs, probes, seed + 1, |g, vars| {
        let bound = BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        f(g, &cfg, &bound)
    })
}

pub fn softmax_rows(m: &Tensor) -> Tensor {
    let (r, c) = m.dims2().unwrap();
    let mut out = m.clone();
    for i in 0..r {
        let row = m.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        for j in 0..c {
            out.set(i, j, e[j] / s);
        }
    }
    out
}

pub fn node_slice(z: &Tensor, i: usize) -> Tensor {
    let s = z.shape();
    let (t, d) = (s[1], s[2]);
    Tensor::new(vec![t, d], z.data()[i * t * d..(i + 1) * t * d].to_vec()).unwrap()
}

pub fn param(p: &ModelParams, name: &str) -> Tensor {
    p.get(name).unwrap().clone()
}

/// `out = σ(Z W_Q′ (P W_K′)ᵀ) σ(P W_Q (Z W_K)ᵀ) Z W_V W_V′`, the `T×T`
/// attention matrix applied to the composed value map.
pub fn expanded_temporal(cfg: &ModelConfig, p: &ModelParams, z: &Tensor, node: usize) -> Tensor {
    let w = |n: &str| param(p, &format!("layers.0.temporal.{n}"));
    let proj = param(p, "layers.0.temporal.projector");
    let scale = 1.0 / (cfg.model_dim as f64).sqrt();
    let zi = node_slice(z, node);
    let s_in = proj
        .matmul(&w("in_q"))
        .unwrap()
        .matmul(&zi.matmul(&w("in_k")).unwrap().t().unwrap())
        .unwrap()
        .map(|v| v * scale);
    let s_out = zi
        .matmul(&w("out_q"))
        .unwrap()
        .matmul(&proj.matmul(&w("out_k")).unwrap().t().unwrap())
        .unwrap()
        .map(|v| v * scale);
    let a = softmax_rows(&s_out).matmul(&softmax_rows(&s_in)).unwrap();
    let values = zi.matmul(&w("in_v")).unwrap().matmul(&w("out_v")).unwrap();
    a.matmul(&values).unwrap()
}

/// Node factors computed directly from the parameters.
pub fn oracle_spatial_factors(
    cfg: &ModelConfig,
    p: &ModelParams,
    layer: usize,
) -> (Tensor, Tensor) {
    let n = cfg.n_nodes;
    let per = cfg.embed_per_step();
    let e = param(p, "node_embed");
    let mean = Tensor::from_fn(&[n, per], |idx| {
        let (i, k) = (idx / per, idx % per);
        (0..cfg.window).map(|t| e.at(i, t * per + k)).sum::<f64>() / cfg.window as f64
    });
    let lin = |name: &str| {
        let w = param(p, &format!("layers.{layer}.spatial.{name}.w"));
        let b = param(p, &format!("layers.{layer}.spatial.{name}.b"));
        let y = mean.matmul(&w).unwrap();
        let c = b.len();
        Tensor::from_fn(y.shape(), |i| y.data()[i] + b.data()[i % c])
    };
    let normalize = |m: Tensor| {
        let f = m.frobenius_norm();
        m.map(|v| v / f)
    };
    let q = softmax_rows(&normalize(lin("query")));
    let k = softmax_rows(&normalize(lin("key")).t().unwrap())
        .t()
        .unwrap();
    (q, k)
}
