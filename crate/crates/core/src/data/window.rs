use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{slice_cols, Dataset, Normalizer, WhitenSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One `N×T` training or inference sample.
///
/// Invariants: `eval ∩ obs = ∅`, `whiten ⊆ obs`, and `x` is exactly zero
/// outside the input cells `obs \ whiten`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatioTemporalWindow {
    /// Normalized input, zero at non-input cells.
    pub x: Tensor,
    /// Normalized ground truth, zero where none exists.
    pub y: Tensor,
    pub obs_mask: Tensor,
    /// Cells missing from the observations but with ground truth.
    pub eval_mask: Tensor,
    pub whiten_mask: Tensor,
    /// Absolute step index of the first column.
    pub start_step: usize,
}

impl SpatioTemporalWindow {
    /// Builds a window from normalized values; no cell is whitened.
    pub fn new(y: Tensor, available: &Tensor, obs_mask: Tensor, start_step: usize) -> Result<Self> {
        if y.shape() != obs_mask.shape() || y.shape() != available.shape() {
            return Err(Error::shape("window", y.shape(), obs_mask.shape()));
        }
        let obs_mask = obs_mask.zip_map(
            available,
            |o, a| if o != 0.0 && a != 0.0 { 1.0 } else { 0.0 },
        )?;
        let eval_mask =
            available.zip_map(
                &obs_mask,
                |a, o| if a != 0.0 && o == 0.0 { 1.0 } else { 0.0 },
            )?;
        let y = y.zip_map(available, |v, a| if a != 0.0 { v } else { 0.0 })?;
        let whiten_mask = Tensor::zeros(y.shape());
        let x = y.zip_map(&obs_mask, |v, o| v * o)?;
        Ok(Self {
            x,
            y,
            obs_mask,
            eval_mask,
            whiten_mask,
            start_step,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Input cells `obs \ whiten`.
    pub fn input_mask(&self) -> Tensor {
        self.obs_mask
            .zip_map(&self.whiten_mask, |o, w| o * (1.0 - w))
            .expect("same shape")
    }

    /// Cells the model never sees during training: whitened or not observed.
    pub fn missing_mask(&self) -> Tensor {
        self.input_mask().map(|v| 1.0 - v)
    }

    /// Samples a fresh whitening mask at `rate` among observed cells and
    /// rebuilds `x`.
    pub fn whiten(&mut self, rate: f64, rng: &mut impl Rng) {
        for (w, &o) in self
            .whiten_mask
            .data_mut()
            .iter_mut()
            .zip(self.obs_mask.data())
        {
            *w = if o != 0.0 && rng.random_bool(rate) {
                1.0
            } else {
                0.0
            };
        }
        let input = self.input_mask();
        self.x = self.y.zip_map(&input, |v, m| v * m).expect("same shape");
    }

    pub fn whiten_with(&mut self, spec: &WhitenSpec, rng: &mut impl Rng) {
        let rate = spec.sample_rate(rng);
        self.whiten(rate, rng);
    }

    /// Checks the mask invariants.
    pub fn check(&self) -> Result<()> {
        let cells = self
            .x
            .data()
            .iter()
            .zip(self.obs_mask.data())
            .zip(self.eval_mask.data())
            .zip(self.whiten_mask.data());
        for (i, (((&x, &o), &e), &w)) in cells.enumerate() {
            if e != 0.0 && o != 0.0 {
                return Err(Error::contract(format!(
                    "cell {i} is both eval and observed"
                )));
            }
            if w != 0.0 && o == 0.0 {
                return Err(Error::contract(format!(
                    "cell {i} whitened but not observed"
                )));
            }
            if (o == 0.0 || w != 0.0) && x != 0.0 {
                return Err(Error::contract(format!(
                    "non-input cell {i} has nonzero input"
                )));
            }
        }
        Ok(())
    }
}

/// Sliding windows of length `window` with step `stride` over `ds`.
///
/// Values are standardized with `norm`; whitening masks are drawn from
/// `whiten` with a generator seeded by `seed`, one window after another.
/// Windows that would run past the end of the series are skipped.
pub fn make_windows(
    ds: &Dataset,
    obs_mask: &Tensor,
    norm: &Normalizer,
    window: usize,
    stride: usize,
    whiten: &WhitenSpec,
    seed: u64,
) -> Result<Vec<SpatioTemporalWindow>> {
    if obs_mask.shape() != ds.values.shape() {
        return Err(Error::shape(
            "make_windows",
            ds.values.shape(),
            obs_mask.shape(),
        ));
    }
    if window == 0 || stride == 0 {
        return Err(Error::contract("window and stride must be positive"));
    }
    if window > ds.n_steps() {
        return Err(Error::contract(format!(
            "window {window} longer than series of {} steps",
            ds.n_steps()
        )));
    }
    whiten.validate()?;
    let normalized = norm.normalize(&ds.values);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= ds.n_steps() {
        let range = start..start + window;
        let mut w = SpatioTemporalWindow::new(
            slice_cols(&normalized, range.clone())?,
            &slice_cols(&ds.available, range.clone())?,
            slice_cols(obs_mask, range)?,
            ds.first_step + start,
        )?;
        w.whiten_with(whiten, &mut rng);
        out.push(w);
        start += stride;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_missing, synth_lowrank, MissingPatternSpec, SynthSpec};

    fn fixture() -> (Dataset, Tensor, Normalizer) {
        let ds = synth_lowrank(&SynthSpec {
            nodes: 6,
            steps: 100,
            rank: 3,
            noise: 0.1,
            steps_per_day: 24,
            seed: 1,
        })
        .unwrap();
        let obs = apply_missing(&ds, &MissingPatternSpec::point(0.3, 2)).unwrap();
        let norm = Normalizer::fit(&ds.values, &obs).unwrap();
        (ds, obs, norm)
    }

    #[test]
    fn windows_respect_invariants() {
        let (ds, obs, norm) = fixture();
        let ws = make_windows(&ds, &obs, &norm, 24, 12, &WhitenSpec::Fixed(0.4), 3).unwrap();
        // starts 0, 12, ..., 72; 84 + 24 > 100 is skipped
        assert_eq!(ws.len(), 7);
        assert_eq!(ws[2].start_step, 24);
        for w in &ws {
            w.check().unwrap();
            assert!(w.whiten_mask.sum() > 0.0);
        }
    }

    #[test]
    fn zero_whitening_gives_empty_masks() {
        let (ds, obs, norm) = fixture();
        let ws = make_windows(&ds, &obs, &norm, 24, 24, &WhitenSpec::Fixed(0.0), 3).unwrap();
        assert!(ws.iter().all(|w| w.whiten_mask.sum() == 0.0));
    }

    #[test]
    fn windows_are_seed_deterministic() {
        let (ds, obs, norm) = fixture();
        let spec = WhitenSpec::combined_default();
        let a = make_windows(&ds, &obs, &norm, 24, 12, &spec, 11).unwrap();
        let b = make_windows(&ds, &obs, &norm, 24, 12, &spec, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn window_longer_than_series_is_rejected() {
        let (ds, obs, norm) = fixture();
        assert!(make_windows(&ds, &obs, &norm, 101, 1, &WhitenSpec::Fixed(0.2), 0).is_err());
    }

    #[test]
    fn check_detects_leaked_input() {
        let (ds, obs, norm) = fixture();
        let mut w = make_windows(&ds, &obs, &norm, 24, 24, &WhitenSpec::Fixed(0.5), 0)
            .unwrap()
            .remove(0);
        let idx = w.whiten_mask.data().iter().position(|&v| v == 1.0).unwrap();
        w.x.data_mut()[idx] = 1.0;
        assert!(w.check().is_err());
    }
}
