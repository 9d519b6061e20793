//! Training objectives: the masked ℓ1 reconstruction loss on whitened cells
//! and the Fourier imputation loss on the observation-spliced prediction.
//! Both are normalized by the full grid size `N·T`.

use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::spectral::dft_l1;
use crate::tensor::Tensor;

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub fil: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Graph handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub recon: Var,
    pub fil: Var,
    pub total: Var,
}

fn check_binary(name: &str, m: &Tensor) -> Result<()> {
    if m.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(Error::contract(format!("{name} must be binary")))
    }
}

/// `(1/NT) Σ |M_whiten ⊙ (X̂ − Y)|`.
///
/// Every whitened cell must be an observed cell; supervising on anything else
/// would read ground truth the model is not allowed to see.
pub fn recon_loss(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    whiten_mask: &Tensor,
    observed_mask: &Tensor,
) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    for t in [target, whiten_mask, observed_mask] {
        if t.shape() != shape.as_slice() {
            return Err(Error::shape("recon_loss", &shape, t.shape()));
        }
    }
    check_binary("whiten mask", whiten_mask)?;
    if let Some(i) = whiten_mask
        .data()
        .iter()
        .zip(observed_mask.data())
        .position(|(&w, &o)| w != 0.0 && o == 0.0)
    {
        return Err(Error::contract(format!(
            "whiten mask marks unobserved cell at flat index {i}"
        )));
    }
    let n = whiten_mask.len() as f64;
    // Zero the target outside the mask so nothing unsupervised enters the graph.
    let masked_target = target.zip_map(whiten_mask, |y, m| y * m)?;
    let y = g.constant(masked_target);
    let m = g.constant(whiten_mask.clone());
    let pm = g.mul(pred, m)?;
    let diff = g.sub(pm, y)?;
    let a = g.abs(diff);
    let s = g.sum(a);
    Ok(g.scale(s, 1.0 / n))
}

/// Fourier imputation loss: splice predictions into the missing cells,
/// observations elsewhere, and take the normalized ℓ1 norm of the 2-D
/// spectrum.
pub fn fil_loss(g: &mut Graph, pred: Var, target: &Tensor, missing_mask: &Tensor) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    for t in [target, missing_mask] {
        if t.shape() != shape.as_slice() {
            return Err(Error::shape("fil_loss", &shape, t.shape()));
        }
    }
    check_binary("missing mask", missing_mask)?;
    let m = g.constant(missing_mask.clone());
    let kept = target.zip_map(missing_mask, |y, m| (1.0 - m) * y)?;
    let kept = g.constant(kept);
    let imputed = g.mul(pred, m)?;
    let spliced = g.add(imputed, kept)?;
    dft_l1(g, spliced)
}

/// `recon + λ·fil`.
pub fn total_loss(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    whiten_mask: &Tensor,
    observed_mask: &Tensor,
    missing_mask: &Tensor,
    lambda: f64,
) -> Result<(LossVars, LossBreakdown)> {
    if !(lambda >= 0.0) {
        return Err(Error::contract(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    let recon = recon_loss(g, pred, target, whiten_mask, observed_mask)?;
    let fil = fil_loss(g, pred, target, missing_mask)?;
    let weighted = g.scale(fil, lambda);
    let total = g.add(recon, weighted)?;
    let breakdown = LossBreakdown {
        recon: g.value(recon).item(),
        fil: g.value(fil).item(),
        total: g.value(total).item(),
        lambda,
    };
    Ok((LossVars { recon, fil, total }, breakdown))
}
