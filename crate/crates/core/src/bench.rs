//! Wall-clock scaling of the attention mechanisms against canonical
//! full-matrix attention. The canonical variants exist only here, as
//! timing controls.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{
    spatial_aggregate, spatial_factors, temporal_projected_attention, BoundParams, ModelConfig,
    ModelParams,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Scale the sequence length `T`.
    Temporal,
    /// Scale the node count `N`.
    Spatial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Nodes when scaling `T`; steps when scaling `N`.
    pub fixed: usize,
    pub model_dim: usize,
    pub projected_dim: usize,
    pub node_embed_key_dim: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            fixed: 8,
            model_dim: 32,
            projected_dim: 6,
            node_embed_key_dim: 8,
            reps: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub attention: AttentionKind,
    /// `projected`, `embedded` or `canonical`.
    pub variant: &'static str,
    pub size: usize,
    /// Median forward time in seconds.
    pub seconds: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_median(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    // one untimed warm-up run
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

fn setup(bc: &BenchConfig, n: usize, t: usize) -> Result<(ModelConfig, ModelParams, Tensor)> {
    let cfg = ModelConfig {
        n_nodes: n,
        window: t,
        input_hidden: 4,
        node_embed_total: t,
        node_embed_key_dim: bc.node_embed_key_dim,
        model_dim: bc.model_dim,
        projected_dim: bc.projected_dim,
        n_layers: 1,
        ffn_hidden: 4,
        n_heads: 1,
        ..ModelConfig::default()
    };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(bc.seed);
    let params = ModelParams::init(&cfg, &mut rng)?;
    let z = Tensor::from_fn(&[n, t, bc.model_dim], |i| {
        ((i * 2654435761) % 1000) as f64 / 500.0 - 1.0
    });
    Ok((cfg, params, z))
}

/// `softmax(Z W_Q (Z W_K)ᵀ / √d) · Z W_V` over the last-but-one axis of
/// `z: [.., L, D′]`, materializing every `L×L` score matrix.
fn canonical_attention(g: &mut Graph, p: &BoundParams, z: Var, d: usize) -> Result<Var> {
    let q = g.matmul(z, p.get("layers.0.temporal.in_q"))?;
    let k = g.matmul(z, p.get("layers.0.temporal.in_k"))?;
    let v = g.matmul(z, p.get("layers.0.temporal.in_v"))?;
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    let last = g.shape(s).len() - 1;
    let a = g.softmax(s, last)?;
    g.matmul(a, v)
}

/// Forward time of one attention variant at one size.
pub fn time_variant(
    kind: AttentionKind,
    variant: &str,
    size: usize,
    bc: &BenchConfig,
) -> Result<f64> {
    let (n, t) = match kind {
        AttentionKind::Temporal => (bc.fixed, size),
        AttentionKind::Spatial => (size, bc.fixed),
    };
    let (cfg, params, z) = setup(bc, n, t)?;
    let d = cfg.model_dim;
    let run = || -> Result<()> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let zv = g.constant(z.clone());
        match (kind, variant) {
            (AttentionKind::Temporal, "projected") => {
                temporal_projected_attention(&mut g, &cfg, &p, 0, zv)?;
            }
            (AttentionKind::Temporal, "canonical") => {
                canonical_attention(&mut g, &p, zv, d)?;
            }
            (AttentionKind::Spatial, "embedded") => {
                let (sq, sk) = spatial_factors(&mut g, &cfg, &p, 0)?;
                spatial_aggregate(&mut g, sq, sk, zv)?;
            }
            (AttentionKind::Spatial, "canonical") => {
                let zt = g.permute(zv, &[1, 0, 2])?;
                canonical_attention(&mut g, &p, zt, d)?;
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown {kind:?} bench variant {variant:?}"
                )))
            }
        }
        Ok(())
    };
    time_median(bc.reps.max(1), run)
}

/// Timing table for `sizes`, efficient variant and canonical control.
pub fn bench(kind: AttentionKind, sizes: &[usize], bc: &BenchConfig) -> Result<Vec<BenchRow>> {
    let efficient = match kind {
        AttentionKind::Temporal => "projected",
        AttentionKind::Spatial => "embedded",
    };
    let mut rows = Vec::new();
    for &size in sizes {
        if size == 0 {
            return Err(Error::Config("bench sizes must be positive".into()));
        }
        for variant in [efficient, "canonical"] {
            let seconds = time_variant(kind, variant, size, bc)?;
            rows.push(BenchRow {
                attention: kind,
                variant,
                size,
                seconds,
            });
        }
    }
    Ok(rows)
}
