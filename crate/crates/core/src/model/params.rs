use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named learnable tensors, kept in name order so iteration, serialization
/// and gradient reduction are deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    entries: BTreeMap<String, Tensor>,
}

/// Parameters registered on a [`Graph`] for one forward pass.
#[derive(Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binds names to existing graph variables, e.g. to differentiate with
    /// respect to parameters registered by the caller.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Name and shape of every parameter implied by `cfg`, with the init rule.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.input_hidden;
    let dm = cfg.model_dim;
    let f = cfg.ffn_hidden;
    let per_step = cfg.embed_per_step();
    let mut out = Vec::new();
    let linear = |out: &mut Vec<_>, name: &str, fan_in: usize, fan_out: usize| {
        out.push((format!("{name}.w"), vec![fan_in, fan_out], Init::Glorot));
        out.push((format!("{name}.b"), vec![fan_out], Init::Zeros));
    };
    linear(&mut out, "input.mlp1", 1, d);
    linear(&mut out, "input.mlp2", d, d);
    linear(&mut out, "input.proj", d + 2 + per_step, dm);
    out.push((
        "node_embed".into(),
        vec![cfg.n_nodes, cfg.node_embed_total],
        Init::Normal,
    ));
    for l in 0..cfg.n_layers {
        let t = format!("layers.{l}.temporal");
        out.push((
            format!("{t}.projector"),
            vec![cfg.projected_dim, dm],
            Init::Normal,
        ));
        for w in ["in_q", "in_k", "in_v", "out_q", "out_k", "out_v"] {
            out.push((format!("{t}.{w}"), vec![dm, dm], Init::Glorot));
        }
        let s = format!("layers.{l}.spatial");
        linear(
            &mut out,
            &format!("{s}.query"),
            per_step,
            cfg.node_embed_key_dim,
        );
        linear(
            &mut out,
            &format!("{s}.key"),
            per_step,
            cfg.node_embed_key_dim,
        );
        for block in [&t, &s] {
            linear(&mut out, &format!("{block}.ffn1"), dm, f);
            linear(&mut out, &format!("{block}.ffn2"), f, dm);
            for ln in ["ln1", "ln2"] {
                out.push((format!("{block}.{ln}.gain"), vec![dm], Init::Ones));
                out.push((format!("{block}.{ln}.bias"), vec![dm], Init::Zeros));
            }
        }
    }
    linear(&mut out, "readout1", dm, f);
    linear(&mut out, "readout2", f, 1);
    out
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Glorot,
    Normal,
    Zeros,
    Ones,
}

const EMBED_STD: f64 = 0.02;

impl ModelParams {
    /// Glorot-uniform linear maps, N(0, 0.02²) node embeddings and projectors,
    /// zero biases and unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0, EMBED_STD).expect("valid std");
        let entries = layout(cfg)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Glorot => {
                        let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
                    }
                    Init::Normal => Tensor::from_fn(&shape, |_| normal.sample(rng)),
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::ones(&shape),
                };
                (name, t)
            })
            .collect();
        Ok(Self { entries })
    }

    /// Builds a parameter set from explicit tensors, checking names and
    /// shapes against `cfg`.
    pub fn from_entries(cfg: &ModelConfig, entries: BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(cfg);
        if expected.len() != entries.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                entries.len()
            )));
        }
        for (name, shape, _) in &expected {
            match entries.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "parameter {name}: expected shape {shape:?}, got {:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(k, t)| (k.clone(), g.param(t.clone())))
            .collect();
        BoundParams { vars }
    }
}
