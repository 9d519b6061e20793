//! The imputation network: input embedding, `L` layers of temporal projected
//! attention and spatial embedded attention, and an MLP readout.
//!
//! Hidden states are `[N, T, D′]` throughout. Temporal attention never mixes
//! nodes and spatial attention never mixes time steps; apart from the two
//! attentions every map is pointwise over `(node, step)`.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::Checkpoint;
pub use config::{BlockOrder, ModelConfig};
pub use params::{BoundParams, ModelParams};

use std::f64::consts::PI;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Attention factors recorded during one layer of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    /// Inflow map `[N, (H,) C, T]`: how the sequence is compressed onto the
    /// projector.
    pub inflow: Option<Var>,
    /// Outflow map `[N, (H,) T, C]`: how the projected state is dispersed back.
    pub outflow: Option<Var>,
    /// Row-normalized node queries `σ₂(Q̃)`, `[N, D_emb]`.
    pub spatial_query: Option<Var>,
    /// Column-normalized node keys `σ₁(K̃)`, `[N, D_emb]`.
    pub spatial_key: Option<Var>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// Imputation `[N, T]` in normalized units, defined on every cell.
    pub prediction: Var,
    pub traces: Vec<LayerTrace>,
}

/// Sinusoidal time-of-day encoding `[T, 2]`: columns are
/// `sin(2π p_t / δ)` and `cos(2π p_t / δ)`.
pub fn time_of_day_encoding(tod: &[usize], day_unit: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(tod.len() * 2);
    for &p in tod {
        if p >= day_unit {
            return Err(Error::contract(format!(
                "time-of-day index {p} outside [0, {day_unit})"
            )));
        }
        let a = p as f64 * 2.0 * PI / day_unit as f64;
        data.push(a.sin());
        data.push(a.cos());
    }
    Tensor::new(vec![tod.len(), 2], data)
}

/// Time-of-day indices for a window starting at absolute step `start`.
pub fn window_time_of_day(start: usize, len: usize, day_unit: usize) -> Vec<usize> {
    (start..start + len).map(|s| s % day_unit).collect()
}

fn mlp(g: &mut Graph, p: &BoundParams, x: Var, first: &str, second: &str) -> Result<Var> {
    let h = g.linear(
        x,
        p.get(&format!("{first}.w")),
        Some(p.get(&format!("{first}.b"))),
    )?;
    let h = g.gelu(h);
    g.linear(
        h,
        p.get(&format!("{second}.w")),
        Some(p.get(&format!("{second}.b"))),
    )
}

/// `LN(LN(z + mixed) + FFN(LN(z + mixed)))`, the encoder wrap shared by
/// both attention blocks.
fn encoder_wrap(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    prefix: &str,
    z: Var,
    mixed: Var,
) -> Result<Var> {
    let eps = cfg.layer_norm_eps;
    let r = g.add(z, mixed)?;
    let h = g.layer_norm(
        r,
        p.get(&format!("{prefix}.ln1.gain")),
        p.get(&format!("{prefix}.ln1.bias")),
        eps,
    )?;
    let ff = mlp(
        g,
        p,
        h,
        &format!("{prefix}.ffn1"),
        &format!("{prefix}.ffn2"),
    )?;
    let r2 = g.add(h, ff)?;
    g.layer_norm(
        r2,
        p.get(&format!("{prefix}.ln2.gain")),
        p.get(&format!("{prefix}.ln2.bias")),
        eps,
    )
}

/// Input embedding: pointwise MLP on each scalar, time-of-day encoding and
/// the per-step slice of the node embedding, concatenated then projected to
/// `D′`.
///
/// `x` must already be zero at every non-input cell; `mask` is only checked
/// for shape and is not fed to the network.
pub fn input_embed(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    x: &Tensor,
    mask: &Tensor,
    tod: &[usize],
) -> Result<Var> {
    let (n, t) = (cfg.n_nodes, cfg.window);
    if x.shape() != [n, t] {
        return Err(Error::shape("input_embed", x.shape(), &[n, t]));
    }
    if mask.shape() != x.shape() {
        return Err(Error::shape("input_embed", x.shape(), mask.shape()));
    }
    if tod.len() != t {
        return Err(Error::contract(format!(
            "expected {t} time-of-day indices, got {}",
            tod.len()
        )));
    }
    let u = time_of_day_encoding(tod, cfg.day_unit)?;

    let xv = g.constant(x.reshape(&[n, t, 1])?);
    let h0 = mlp(g, p, xv, "input.mlp1", "input.mlp2")?;
    let uv = g.constant(u);
    let uv = g.expand(uv, &[n]);
    let e = g.reshape(p.get("node_embed"), &[n, t, cfg.embed_per_step()])?;
    let cat = g.concat(&[h0, uv, e], 2)?;
    g.linear(cat, p.get("input.proj.w"), Some(p.get("input.proj.b")))
}

/// `[.., L, D′] → [.., H, L, D′/H]`; identity when `H = 1`.
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    if heads == 1 {
        return Ok(x);
    }
    let s = g.shape(x).to_vec();
    let nd = s.len();
    let (l, d) = (s[nd - 2], s[nd - 1]);
    let mut shape = s[..nd - 2].to_vec();
    shape.extend([l, heads, d / heads]);
    let r = g.reshape(x, &shape)?;
    let mut axes: Vec<usize> = (0..nd - 2).collect();
    axes.extend([nd - 1, nd - 2, nd]);
    g.permute(r, &axes)
}

/// Inverse of [`split_heads`].
fn merge_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    if heads == 1 {
        return Ok(x);
    }
    let s = g.shape(x).to_vec();
    let nd = s.len();
    let mut axes: Vec<usize> = (0..nd - 3).collect();
    axes.extend([nd - 2, nd - 3, nd - 1]);
    let pm = g.permute(x, &axes)?;
    let mut shape = s[..nd - 3].to_vec();
    shape.extend([s[nd - 2], s[nd - 3] * s[nd - 1]]);
    g.reshape(pm, &shape)
}

/// Projected attention of layer `layer` on `z: [N, T, D′]`, without the
/// encoder wrap. Returns `(Ẑ, inflow, outflow)`.
///
/// Inflow compresses the `T` steps onto the `C` projector rows,
/// `Z̃ = softmax(P W_Q (Z W_K)ᵀ / √d) · Z W_V`; outflow reads them back with
/// the projector as key dictionary,
/// `Ẑ = softmax(Z W_Q′ (P W_K′)ᵀ / √d) · Z̃ W_V′`. Cost is linear in `T`.
pub fn temporal_projected_attention(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    layer: usize,
    z: Var,
) -> Result<(Var, Var, Var)> {
    let pre = format!("layers.{layer}.temporal");
    let w = |name: &str| p.get(&format!("{pre}.{name}"));
    let heads = cfg.n_heads;
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    let proj = p.get(&format!("{pre}.projector"));

    let pq = g.matmul(proj, w("in_q"))?;
    let pq = split_heads(g, pq, heads)?;
    let k = g.matmul(z, w("in_k"))?;
    let k = split_heads(g, k, heads)?;
    let kt = g.transpose(k)?;
    let v = g.matmul(z, w("in_v"))?;
    let v = split_heads(g, v, heads)?;
    let scores = g.matmul(pq, kt)?;
    let scores = g.scale(scores, scale);
    let last = g.shape(scores).len() - 1;
    let inflow = g.softmax(scores, last)?;
    let compressed = g.matmul(inflow, v)?;
    let compressed = merge_heads(g, compressed, heads)?;

    let q = g.matmul(z, w("out_q"))?;
    let q = split_heads(g, q, heads)?;
    let pk = g.matmul(proj, w("out_k"))?;
    let pk = split_heads(g, pk, heads)?;
    let pkt = g.transpose(pk)?;
    let v2 = g.matmul(compressed, w("out_v"))?;
    let v2 = split_heads(g, v2, heads)?;
    let scores = g.matmul(q, pkt)?;
    let scores = g.scale(scores, scale);
    let last = g.shape(scores).len() - 1;
    let outflow = g.softmax(scores, last)?;
    let out = g.matmul(outflow, v2)?;
    let out = merge_heads(g, out, heads)?;
    Ok((out, inflow, outflow))
}

fn frobenius_normalize(g: &mut Graph, x: Var) -> Var {
    let sq = g.mul(x, x).expect("same shape");
    let ss = g.sum(sq);
    let norm = g.sqrt(ss);
    let inv = g.recip(norm);
    g.mul(x, inv).expect("scalar broadcast")
}

/// Node-embedding attention factors of layer `layer`:
/// `(σ₂(Q̃), σ₁(K̃))`, each `[N, D_emb]`, where the embedding set is the
/// node embedding averaged over its temporal heads.
pub fn spatial_factors(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    layer: usize,
) -> Result<(Var, Var)> {
    let pre = format!("layers.{layer}.spatial");
    let n = cfg.n_nodes;
    let e = g.reshape(p.get("node_embed"), &[n, cfg.window, cfg.embed_per_step()])?;
    let e = g.mean_axis(e, 1)?;
    let q = g.linear(
        e,
        p.get(&format!("{pre}.query.w")),
        Some(p.get(&format!("{pre}.query.b"))),
    )?;
    let k = g.linear(
        e,
        p.get(&format!("{pre}.key.w")),
        Some(p.get(&format!("{pre}.key.b"))),
    )?;
    let q = frobenius_normalize(g, q);
    let k = frobenius_normalize(g, k);
    let sq = g.softmax(q, 1)?;
    let sk = g.softmax(k, 0)?;
    Ok((sq, sk))
}

/// Aggregates `z: [N, T, D′]` over nodes with `A = σ₂(Q̃) σ₁(K̃)ᵀ`, computing
/// `σ₁(K̃)ᵀ Z_t` first so the `N×N` matrix is never formed.
pub fn spatial_aggregate(g: &mut Graph, sq: Var, sk: Var, z: Var) -> Result<Var> {
    let zt = g.permute(z, &[1, 0, 2])?;
    let skt = g.transpose(sk)?;
    let summary = g.matmul(skt, zt)?;
    let mixed = g.matmul(sq, summary)?;
    g.permute(mixed, &[1, 0, 2])
}

fn temporal_block(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    layer: usize,
    z: Var,
    trace: &mut LayerTrace,
) -> Result<Var> {
    let mixed = if cfg.temporal_attention {
        let (out, inflow, outflow) = temporal_projected_attention(g, cfg, p, layer, z)?;
        trace.inflow = Some(inflow);
        trace.outflow = Some(outflow);
        out
    } else {
        z
    };
    encoder_wrap(g, cfg, p, &format!("layers.{layer}.temporal"), z, mixed)
}

fn spatial_block(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    layer: usize,
    z: Var,
    trace: &mut LayerTrace,
) -> Result<Var> {
    let mixed = if cfg.spatial_attention {
        let (sq, sk) = spatial_factors(g, cfg, p, layer)?;
        trace.spatial_query = Some(sq);
        trace.spatial_key = Some(sk);
        spatial_aggregate(g, sq, sk, z)?
    } else {
        z
    };
    encoder_wrap(g, cfg, p, &format!("layers.{layer}.spatial"), z, mixed)
}

/// Full network on one window. `x` is the normalized, zero-filled input,
/// `mask` the input-cell indicator and `tod` the time-of-day index of each
/// step.
pub fn forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    x: &Tensor,
    mask: &Tensor,
    tod: &[usize],
) -> Result<ForwardOutput> {
    let mut z = input_embed(g, cfg, p, x, mask, tod)?;
    let mut traces = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let mut trace = LayerTrace {
            inflow: None,
            outflow: None,
            spatial_query: None,
            spatial_key: None,
        };
        z = match cfg.block_order {
            BlockOrder::TemporalSpatial => {
                let z = temporal_block(g, cfg, p, layer, z, &mut trace)?;
                spatial_block(g, cfg, p, layer, z, &mut trace)?
            }
            BlockOrder::SpatialTemporal => {
                let z = spatial_block(g, cfg, p, layer, z, &mut trace)?;
                temporal_block(g, cfg, p, layer, z, &mut trace)?
            }
        };
        traces.push(trace);
    }
    let out = mlp(g, p, z, "readout1", "readout2")?;
    let prediction = g.reshape(out, &[cfg.n_nodes, cfg.window])?;
    Ok(ForwardOutput { prediction, traces })
}

/// Convenience wrapper: runs [`forward`] on a fresh graph and returns the
/// prediction values.
pub fn predict(
    cfg: &ModelConfig,
    params: &ModelParams,
    x: &Tensor,
    mask: &Tensor,
    tod: &[usize],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = forward(&mut g, cfg, &bound, x, mask, tod)?;
    Ok(g.value(out.prediction).clone())
}

/// The implied `T×T` temporal attention matrix `outflow · inflow` for one
/// node (and head).
pub fn implied_temporal_matrix(
    g: &Graph,
    trace: &LayerTrace,
    node: usize,
    head: usize,
) -> Option<Tensor> {
    let inflow = g.value(trace.inflow?);
    let outflow = g.value(trace.outflow?);
    let s = inflow.shape();
    let (c, t) = (s[s.len() - 2], s[s.len() - 1]);
    let heads = if s.len() == 4 { s[1] } else { 1 };
    let block = (node * heads + head) * c * t;
    let inf = Tensor::new(vec![c, t], inflow.data()[block..block + c * t].to_vec()).ok()?;
    let outf = Tensor::new(vec![t, c], outflow.data()[block..block + c * t].to_vec()).ok()?;
    outf.matmul(&inf).ok()
}

/// The implied `N×N` spatial attention matrix `σ₂(Q̃) σ₁(K̃)ᵀ`.
pub fn implied_spatial_matrix(g: &Graph, trace: &LayerTrace) -> Option<Tensor> {
    let q = g.value(trace.spatial_query?);
    let k = g.value(trace.spatial_key?);
    q.matmul(&k.t().ok()?).ok()
}
