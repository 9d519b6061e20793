//! Discrete Fourier transforms, the differentiable spectral ℓ1 norm,
//! circulant matrices and one-sided Jacobi SVD.

use std::f64::consts::PI;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Complex array stored as separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub shape: Vec<usize>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexSpectrum {
    pub fn from_real(x: &Tensor) -> Self {
        Self {
            shape: x.shape().to_vec(),
            re: x.data().to_vec(),
            im: vec![0.0; x.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    /// Complex moduli `|z_k|`.
    pub fn moduli(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r.hypot(*i))
            .collect()
    }

    pub fn l1_norm(&self) -> f64 {
        self.moduli().iter().sum()
    }

    /// Σ |z_k|².
    pub fn energy(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .sum()
    }
}

/// Singular values sorted in non-increasing order.
#[derive(Clone, Debug, PartialEq)]
pub struct SingularSpectrum {
    pub values: Vec<f64>,
}

impl SingularSpectrum {
    pub fn nuclear_norm(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Running Σσᵢ² normalized by the total.
    pub fn cumulative_energy(&self) -> Vec<f64> {
        cumulative_fraction(self.values.iter().map(|s| s * s))
    }

    /// Running Σσᵢ normalized by the nuclear norm.
    pub fn cumulative_sum(&self) -> Vec<f64> {
        cumulative_fraction(self.values.iter().copied())
    }

    /// Number of singular values above `rel_tol · σ₁`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let top = self.values.first().copied().unwrap_or(0.0);
        self.values.iter().filter(|&&s| s > rel_tol * top).count()
    }
}

fn cumulative_fraction(it: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = it
        .map(|v| {
            acc += v;
            acc
        })
        .collect();
    if acc > 0.0 {
        out.iter_mut().for_each(|v| *v /= acc);
    }
    out
}

/// Unscaled forward (`sign = -1`) or adjoint (`sign = +1`) transform of one
/// complex line in place.
fn transform_line(re: &mut [f64], im: &mut [f64], sign: f64) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        fft_radix2(re, im, sign);
    } else {
        let (r, i) = dft_direct(re, im, sign);
        re.copy_from_slice(&r);
        im.copy_from_slice(&i);
    }
}

/// O(n²) reference transform. Twiddle angles use `(k·j) mod n` so that the
/// argument stays small for long lines.
pub fn dft_direct(re: &[f64], im: &[f64], sign: f64) -> (Vec<f64>, Vec<f64>) {
    let n = re.len();
    let (cos, sin): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|j| {
            let a = sign * 2.0 * PI * j as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .unzip();
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for j in 0..n {
            let t = (k * j) % n;
            sr += re[j] * cos[t] - im[j] * sin[t];
            si += re[j] * sin[t] + im[j] * cos[t];
        }
        out_re[k] = sr;
        out_im[k] = si;
    }
    (out_re, out_im)
}

/// Iterative radix-2 Cooley-Tukey. `re.len()` must be a power of two.
fn fft_radix2(re: &mut [f64], im: &mut [f64], sign: f64) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for k in 0..half {
            let a = sign * 2.0 * PI * k as f64 / len as f64;
            let (wr, wi) = (a.cos(), a.sin());
            for start in (0..n).step_by(len) {
                let (p, q) = (start + k, start + k + half);
                let tr = re[q] * wr - im[q] * wi;
                let ti = re[q] * wi + im[q] * wr;
                re[q] = re[p] - tr;
                im[q] = im[p] - ti;
                re[p] += tr;
                im[p] += ti;
            }
        }
        len <<= 1;
    }
}

fn transform_axes(spec: &mut ComplexSpectrum, axes: &[usize], sign: f64) -> Result<()> {
    let shape = spec.shape.clone();
    for &axis in axes {
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "dft axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut lr = vec![0.0; len];
        let mut li = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for j in 0..len {
                    lr[j] = spec.re[base + j * inner];
                    li[j] = spec.im[base + j * inner];
                }
                transform_line(&mut lr, &mut li, sign);
                for j in 0..len {
                    spec.re[base + j * inner] = lr[j];
                    spec.im[base + j * inner] = li[j];
                }
            }
        }
    }
    Ok(())
}

/// Unscaled DFT `X_k = Σ x_n e^{-2πikn/N}` of a real tensor, applied
/// separably over each listed axis.
pub fn dft(x: &Tensor, axes: &[usize]) -> Result<ComplexSpectrum> {
    let mut spec = ComplexSpectrum::from_real(x);
    transform_axes(&mut spec, axes, -1.0)?;
    Ok(spec)
}

/// Adjoint of [`dft`] (the unnormalized inverse) over the listed axes.
pub fn dft_adjoint(spec: &ComplexSpectrum, axes: &[usize]) -> Result<ComplexSpectrum> {
    let mut out = spec.clone();
    transform_axes(&mut out, axes, 1.0)?;
    Ok(out)
}

/// Σ|X_k| / (N·T) for the 2-D transform of an `N×T` matrix, as a plain value.
pub fn spectral_l1(x: &Tensor) -> Result<f64> {
    let (n, t) = x.dims2()?;
    Ok(dft(x, &[0, 1])?.l1_norm() / (n * t) as f64)
}

/// Differentiable [`spectral_l1`].
///
/// The gradient of `|z_k|` with respect to the input is the real part of the
/// adjoint transform of `z_k / |z_k|`; spectral zeros contribute nothing.
pub fn dft_l1(g: &mut Graph, x: Var) -> Result<Var> {
    let value = g.value(x);
    let (n, t) = value.dims2()?;
    let scale = 1.0 / (n * t) as f64;
    let spec = dft(value, &[0, 1])?;
    let loss = spec.l1_norm() * scale;
    let backward = move |grad_out: &Tensor, inputs: &[&Tensor]| {
        let spec = dft(inputs[0], &[0, 1]).expect("dft_l1 forward");
        let mut unit = spec.clone();
        for k in 0..unit.len() {
            let m = spec.re[k].hypot(spec.im[k]);
            if m > 0.0 {
                unit.re[k] /= m;
                unit.im[k] /= m;
            } else {
                unit.re[k] = 0.0;
                unit.im[k] = 0.0;
            }
        }
        let adj = dft_adjoint(&unit, &[0, 1]).expect("dft_l1 adjoint");
        let c = grad_out.item() * scale;
        let grad =
            Tensor::new(vec![n, t], adj.re.iter().map(|v| v * c).collect()).expect("dft_l1 grad");
        vec![grad]
    };
    Ok(g.custom(&[x], Tensor::scalar(loss), backward))
}

/// Circulant matrix whose column `j` is `x` cyclically shifted down by `j`.
pub fn circulant(x: &[f64]) -> Result<Tensor> {
    let t = x.len();
    if t == 0 {
        return Err(Error::contract("circulant of an empty vector"));
    }
    Ok(Tensor::from_fn(&[t, t], |idx| {
        let (i, j) = (idx / t, idx % t);
        x[(i + t - j) % t]
    }))
}

/// Thin singular value decomposition `m = U·diag(s)·Vᵀ`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `r×k` with orthonormal columns (zero columns for zero singular values).
    pub u: Tensor,
    pub s: Vec<f64>,
    /// `c×k` with orthonormal columns.
    pub v: Tensor,
}

const JACOBI_TOL: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 100;

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(m: &Tensor) -> Result<Svd> {
    let (r, c) = m.dims2()?;
    if !m.all_finite() {
        return Err(Error::Numeric("svd of a non-finite matrix".into()));
    }
    // Orthogonalize the columns of whichever orientation is tall.
    let transposed = c > r;
    let a = if transposed { m.t()? } else { m.clone() };
    let (rows, cols) = a.dims2()?;
    // Columns stored contiguously.
    let mut w: Vec<Vec<f64>> = (0..cols).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    // Columns below roundoff of the whole matrix are numerically zero.
    let frob2: f64 = w.iter().flatten().map(|x| x * x).sum();
    let negligible = (rows.max(cols) as f64 * f64::EPSILON).powi(2) * frob2;
    let mut converged = cols < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = {
                    let (wp, wq) = (&w[p], &w[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for i in 0..rows {
                        al += wp[i] * wp[i];
                        be += wq[i] * wq[i];
                        ga += wp[i] * wq[i];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0
                    || alpha <= negligible
                    || beta <= negligible
                    || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                rotate(&mut w, p, q, cs, sn);
                rotate(&mut v, p, q, cs, sn);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = w
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let k = cols;
    let mut left = Tensor::zeros(&[rows, k]);
    let mut right = Tensor::zeros(&[cols, k]);
    let mut s = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        s.push(sigma);
        for i in 0..rows {
            let val = if sigma > 0.0 { w[src][i] / sigma } else { 0.0 };
            left.set(i, dst, val);
        }
        for i in 0..cols {
            right.set(i, dst, v[src][i]);
        }
    }
    Ok(if transposed {
        Svd {
            u: right,
            s,
            v: left,
        }
    } else {
        Svd {
            u: left,
            s,
            v: right,
        }
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Singular values of `m`, largest first.
pub fn svd_values(m: &Tensor) -> Result<SingularSpectrum> {
    Ok(SingularSpectrum { values: svd(m)?.s })
}

/// Moore-Penrose pseudo-inverse; singular values at or below
/// `rel_tol · σ₁` are treated as zero.
pub fn pseudo_inverse(m: &Tensor, rel_tol: f64) -> Result<Tensor> {
    let (r, c) = m.dims2()?;
    let Svd { u, s, v } = svd(m)?;
    let cutoff = rel_tol * s.first().copied().unwrap_or(0.0);
    let mut out = Tensor::zeros(&[c, r]);
    for (k, &sigma) in s.iter().enumerate() {
        if sigma <= cutoff || sigma == 0.0 {
            continue;
        }
        let inv = 1.0 / sigma;
        for i in 0..c {
            let vik = v.at(i, k) * inv;
            if vik == 0.0 {
                continue;
            }
            for j in 0..r {
                let cur = out.at(i, j);
                out.set(i, j, cur + vik * u.at(j, k));
            }
        }
    }
    Ok(out)
}

/// Both sides of the Fourier/circulant identity for a real vector:
/// `(Σ|DFT(x)_k|, ‖C(x)‖_*)`.
pub fn lemma1_check(x: &[f64]) -> Result<(f64, f64)> {
    let t = Tensor::new(vec![x.len()], x.to_vec())?;
    let fourier = dft(&t, &[0])?.l1_norm();
    let nuclear = svd_values(&circulant(x)?)?.nuclear_norm();
    Ok((fourier, nuclear))
}
