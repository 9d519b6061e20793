//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is the tape: every operation appends a node holding its
//! forward value and the rule needed to push gradients back to its inputs.
//! Nodes only ever reference earlier nodes, so the tape is topologically
//! ordered by construction and [`Graph::backward`] is a single reverse sweep.
//!
//! Broadcasting is limited to leading dimensions: for the binary ops below
//! the right-hand operand's shape must be a suffix of the left-hand one.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined operation. Receives the output gradient
/// and the input values, returns one gradient per input.
pub type CustomBackward = dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor> + Send + Sync;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Relu(Var),
    Gelu(Var),
    Sqrt(Var),
    Recip(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Expand(Var),
    Custom {
        inputs: Vec<Var>,
        backward: Box<CustomBackward>,
    },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Abs(..) => "abs",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Permute { .. } => "permute",
            Op::Reshape(..) => "reshape",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll(..) => "sum_all",
            Op::Expand(..) => "expand",
            Op::Custom { .. } => "custom",
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// The tape. Rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// dLoss/dVar, or `None` when `var` does not influence the loss or does
    /// not track gradients.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Splits `shape` around `axis` into (outer, axis_len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// Sums a gradient shaped like the broadcast output down to `target` (a
/// suffix of the output shape).
fn reduce_to(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let n = numel(target);
    let mut out = vec![0.0; n];
    for chunk in grad.data().chunks(n) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    Tensor::new(target.to_vec(), out).expect("reduce_to shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]`.
    ///
    /// Batch dimensions must be equal, or one operand's batch shape must be a
    /// suffix of the other's (a plain 2-D operand broadcasts over any batch).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        if k != k2 || !(is_suffix(ba, bb) || is_suffix(bb, ba)) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch_shape = if ba.len() >= bb.len() { ba } else { bb };
        let batches = numel(batch_shape);
        let (na, nb) = (numel(ba), numel(bb));
        let mut out = vec![0.0; batches * m * n];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for bi in 0..batches {
                let ia = bi % na;
                let ib = bi % nb;
                gemm_nn(
                    &da[ia * m * k..(ia + 1) * m * k],
                    &db[ib * k * n..(ib + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch_shape.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::MatMul(a, b)))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sb, sa) {
            Ok(())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let vb = self.value(b).data();
        let nb = vb.len();
        let data: Vec<f64> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb[i % nb]))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("binary shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, op)
    }

    /// `a + b`, with `b` broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    /// `a - b`, with `b` broadcast over leading dimensions of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("sub", a, b)?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise `a ⊙ b`, with `b` broadcast over leading dimensions of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, rg, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `|x|`, subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, f64::recip, Op::Recip(x))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    z += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis followed by the affine map
    /// `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::contract("layer_norm on a scalar"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut out = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rs * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
            },
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::contract(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = vec![0.0; numel(&shape)];
        let mut offset = 0;
        for &v in inputs {
            let len = self.shape(v)[axis];
            let src = self.value(v).data();
            for o in 0..outer {
                let dst_start = (o * total + offset) * inner;
                let src_start = o * len * inner;
                out[dst_start..dst_start + len * inner]
                    .copy_from_slice(&src[src_start..src_start + len * inner]);
            }
            offset += len;
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        if axis >= src_shape.len() || start + len > src_shape[axis] {
            return Err(Error::contract(format!(
                "slice {start}..{} on axis {axis} of shape {src_shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_extents(&src_shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut shape = src_shape;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Slice { x, axis, start }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        let mut seen = vec![false; src_shape.len()];
        if axes.len() != src_shape.len()
            || axes
                .iter()
                .any(|&a| a >= seen.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::contract(format!(
                "invalid permutation {axes:?} for shape {src_shape:?}"
            )));
        }
        let out = permute_data(self.value(x), axes);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            rg,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::contract("transpose needs at least 2 dims"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        if axis >= src_shape.len() {
            return Err(Error::contract(format!("sum axis {axis} out of range")));
        }
        let (outer, len, inner) = axis_extents(&src_shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let s = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[s + i];
                }
            }
        }
        let mut shape = src_shape;
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::contract(format!("mean axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Sum of all elements as a scalar (shape `[]`).
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, rg, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Repeats `x` over new leading dimensions `lead`.
    pub fn expand(&mut self, x: Var, lead: &[usize]) -> Var {
        let src = self.value(x);
        let reps = numel(lead);
        let mut data = Vec::with_capacity(src.len() * reps);
        for _ in 0..reps {
            data.extend_from_slice(src.data());
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(src.shape());
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).expect("expand"), rg, Op::Expand(x))
    }

    /// `x · W + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Appends an operation whose forward value was computed elsewhere and
    /// whose backward rule is supplied as a closure.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor]) -> Vec<Tensor> + Send + Sync + 'static,
    ) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients of nodes used more than
    /// once accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, gi) in self.input_grads(node, &g) {
                if !self.rg(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g),
            Op::Add(a, b) => {
                let gb = reduce_to(g, self.shape(*b));
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::Sub(a, b) => {
                let gb = reduce_to(&g.map(|v| -v), self.shape(*b));
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b).data();
                let nb = vb.len();
                let ga = Tensor::from_fn(g.shape(), |i| g.data()[i] * vb[i % nb]);
                let gb_full = Tensor::from_fn(g.shape(), |i| g.data()[i] * va.data()[i]);
                vec![(*a, ga), (*b, reduce_to(&gb_full, self.shape(*b)))]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Abs(x) => {
                let vx = self.value(*x).data();
                let gi = Tensor::from_fn(g.shape(), |i| {
                    let s = vx[i];
                    if s > 0.0 {
                        g.data()[i]
                    } else if s < 0.0 {
                        -g.data()[i]
                    } else {
                        0.0
                    }
                });
                vec![(*x, gi)]
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                let gi =
                    Tensor::from_fn(g.shape(), |i| if vx[i] > 0.0 { g.data()[i] } else { 0.0 });
                vec![(*x, gi)]
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                vec![(
                    *x,
                    Tensor::from_fn(g.shape(), |i| g.data()[i] * gelu_grad(vx[i])),
                )]
            }
            Op::Sqrt(x) => {
                let gi = Tensor::from_fn(g.shape(), |i| g.data()[i] * 0.5 / out.data()[i]);
                vec![(*x, gi)]
            }
            Op::Recip(x) => {
                let gi = Tensor::from_fn(g.shape(), |i| {
                    let y = out.data()[i];
                    -g.data()[i] * y * y
                });
                vec![(*x, gi)]
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_extents(out.shape(), *axis);
                let y = out.data();
                let gd = g.data();
                let mut gi = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|j| y[base + j * inner] * gd[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            gi[p] = y[p] * (gd[p] - dot);
                        }
                    }
                }
                vec![(
                    *x,
                    Tensor::new(out.shape().to_vec(), gi).expect("softmax grad"),
                )]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
            } => self.layer_norm_backward(*x, *gain, *bias, rstd, g),
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let total = shape[*axis];
                let (outer, _, inner) = axis_extents(shape, *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let s = self.shape(v);
                    let len = s[*axis];
                    let mut gi = Vec::with_capacity(numel(s));
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gi.extend_from_slice(&g.data()[start..start + len * inner]);
                    }
                    offset += len;
                    res.push((v, Tensor::new(s.to_vec(), gi).expect("concat grad")));
                }
                res
            }
            Op::Slice { x, axis, start } => {
                let src_shape = self.shape(*x);
                let (outer, full, inner) = axis_extents(src_shape, *axis);
                let len = out.shape()[*axis];
                let mut gi = Tensor::zeros(src_shape);
                for o in 0..outer {
                    let d = (o * full + start) * inner;
                    let s = o * len * inner;
                    gi.data_mut()[d..d + len * inner]
                        .copy_from_slice(&g.data()[s..s + len * inner]);
                }
                vec![(*x, gi)]
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                vec![(*x, permute_data(g, &inv))]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(self.shape(*x)).expect("reshape grad"))],
            Op::SumAxis { x, axis } => {
                let src_shape = self.shape(*x);
                let (outer, len, inner) = axis_extents(src_shape, *axis);
                let mut gi = Vec::with_capacity(numel(src_shape));
                for o in 0..outer {
                    for _ in 0..len {
                        gi.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*x, Tensor::new(src_shape.to_vec(), gi).expect("sum grad"))]
            }
            Op::SumAll(x) => vec![(*x, Tensor::full(self.shape(*x), g.item()))],
            Op::Expand(x) => vec![(*x, reduce_to(g, self.shape(*x)))],
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = backward(g, &vals);
                assert_eq!(gs.len(), inputs.len(), "custom backward arity");
                inputs.iter().copied().zip(gs).collect()
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor) -> Vec<(Var, Tensor)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let na = numel(&sa[..sa.len() - 2]);
        let nb = numel(&sb[..sb.len() - 2]);
        let batches = na.max(nb);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let gd = g.data();
        let mut res = Vec::with_capacity(2);
        if self.rg(a) {
            let mut ga = vec![0.0; da.len()];
            for bi in 0..batches {
                let (ia, ib) = (bi % na, bi % nb);
                gemm_nt(
                    &gd[bi * m * n..(bi + 1) * m * n],
                    &db[ib * k * n..(ib + 1) * k * n],
                    &mut ga[ia * m * k..(ia + 1) * m * k],
                    m,
                    n,
                    k,
                );
            }
            res.push((a, Tensor::new(sa.to_vec(), ga).expect("matmul grad a")));
        }
        if self.rg(b) {
            let mut gb = vec![0.0; db.len()];
            for bi in 0..batches {
                let (ia, ib) = (bi % na, bi % nb);
                gemm_tn(
                    &da[ia * m * k..(ia + 1) * m * k],
                    &gd[bi * m * n..(bi + 1) * m * n],
                    &mut gb[ib * k * n..(ib + 1) * k * n],
                    k,
                    m,
                    n,
                );
            }
            res.push((b, Tensor::new(sb.to_vec(), gb).expect("matmul grad b")));
        }
        res
    }

    fn layer_norm_backward(
        &self,
        x: Var,
        gain: Var,
        bias: Var,
        rstd: &[f64],
        g: &Tensor,
    ) -> Vec<(Var, Tensor)> {
        let vx = self.value(x);
        let gamma = self.value(gain).data();
        let d = gamma.len();
        let rows = vx.len() / d;
        let mut gx = vec![0.0; vx.len()];
        let mut ggain = vec![0.0; d];
        let mut gbias = vec![0.0; d];
        let mut xhat = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let grow = &g.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let rs = rstd[r];
            for j in 0..d {
                xhat[j] = (row[j] - mean) * rs;
                dxhat[j] = grow[j] * gamma[j];
                ggain[j] += grow[j] * xhat[j];
                gbias[j] += grow[j];
            }
            let sum_dx: f64 = dxhat.iter().sum();
            let sum_dx_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
            let inv_d = 1.0 / d as f64;
            for j in 0..d {
                gx[r * d + j] = rs * (dxhat[j] - inv_d * sum_dx - xhat[j] * inv_d * sum_dx_xhat);
            }
        }
        vec![
            (x, Tensor::new(vx.shape().to_vec(), gx).expect("ln grad")),
            (gain, Tensor::new(vec![d], ggain).expect("ln gain grad")),
            (bias, Tensor::new(vec![d], gbias).expect("ln bias grad")),
        ]
    }
}

fn permute_data(src: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = src.shape();
    let nd = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    let data = src.data();
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute")
}
