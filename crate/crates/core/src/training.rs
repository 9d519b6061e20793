//! Mini-batch Adam training on whitened windows, sliding-window imputation
//! and masked evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{
    make_windows, slice_cols, Dataset, Normalizer, SpatioTemporalWindow, SplitRatios, WhitenSpec,
};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::model::{forward, predict, window_time_of_day, ModelConfig, ModelParams};
use crate::spectral::{svd_values, SingularSpectrum};
use crate::tensor::Tensor;

/// Which cells the Fourier loss fills with predictions during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilMask {
    /// Every non-input cell: whitened plus truly missing.
    #[default]
    WhitenedAndMissing,
    /// Only cells missing from the observations.
    MissingOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Floor of the cosine schedule.
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Windows per optimizer step.
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub lambda: f64,
    pub fil_mask: FilMask,
    /// Training window stride; `None` means `T/2`.
    pub train_stride: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            min_lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 8,
            max_epochs: 100,
            patience: 15,
            grad_clip_norm: 5.0,
            lambda: 0.01,
            fil_mask: FilMask::default(),
            train_stride: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.min_lr >= 0.0) {
            return bad(format!("min_lr must be >= 0, got {}", self.min_lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must be in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("adam eps must be > 0".into());
        }
        if self.batch == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch, max_epochs and patience must be >= 1".into());
        }
        if !(self.grad_clip_norm >= 0.0) {
            return bad("grad_clip_norm must be >= 0 (0 disables)".into());
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            ));
        }
        if self.train_stride == Some(0) {
            return bad("train_stride must be >= 1".into());
        }
        Ok(())
    }

    /// Cosine decay from `lr` to `min(min_lr, lr)` over `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let floor = self.min_lr.min(self.lr);
        if total <= 1 {
            return self.lr;
        }
        let frac = (step as f64 / (total - 1) as f64).min(1.0);
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.len()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w -= lr * update;
            }
        }
    }
}

/// Rescales `grads` in place so their joint ℓ2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Ground truth restricted to observed cells. Selection, not
/// multiplication, so non-finite values elsewhere cannot leak in.
fn observed_target(w: &SpatioTemporalWindow) -> Tensor {
    w.y.zip_map(&w.obs_mask, |y, o| if o != 0.0 { y } else { 0.0 })
        .expect("window masks share shape")
}

fn fil_cells(w: &SpatioTemporalWindow, kind: FilMask) -> Tensor {
    match kind {
        FilMask::WhitenedAndMissing => w.missing_mask(),
        FilMask::MissingOnly => w.obs_mask.map(|o| 1.0 - o),
    }
}

fn check_window(cfg: &ModelConfig, w: &SpatioTemporalWindow) -> Result<()> {
    if w.x.shape() != [cfg.n_nodes, cfg.window] {
        return Err(Error::shape(
            "window vs model",
            w.x.shape(),
            &[cfg.n_nodes, cfg.window],
        ));
    }
    Ok(())
}

/// Loss and parameter gradients on a single window.
pub fn window_gradients(
    cfg: &ModelConfig,
    params: &ModelParams,
    w: &SpatioTemporalWindow,
    lambda: f64,
    fil_mask: FilMask,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    check_window(cfg, w)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let tod = window_time_of_day(w.start_step, cfg.window, cfg.day_unit);
    let input = w.input_mask();
    let out = forward(&mut g, cfg, &bound, &w.x, &input, &tod)?;
    let target = observed_target(w);
    let (vars, breakdown) = total_loss(
        &mut g,
        out.prediction,
        &target,
        &w.whiten_mask,
        &w.obs_mask,
        &fil_cells(w, fil_mask),
        lambda,
    )?;
    let mut grads = g.backward(vars.total)?;
    let mut out = BTreeMap::new();
    for (name, var) in bound.iter() {
        let gt = grads
            .take(var)
            .unwrap_or_else(|| Tensor::zeros(g.shape(var)));
        out.insert(name.to_string(), gt);
    }
    Ok((breakdown, out))
}

/// Mean loss and gradients over a batch. Windows may be processed on
/// `threads` workers; summation always follows window order.
pub fn batch_gradients(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &[&SpatioTemporalWindow],
    lambda: f64,
    fil_mask: FilMask,
    threads: usize,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    type Item = Result<(LossBreakdown, BTreeMap<String, Tensor>)>;
    let results: Vec<Item> = if threads <= 1 || batch.len() <= 1 {
        batch
            .iter()
            .map(|w| window_gradients(cfg, params, w, lambda, fil_mask))
            .collect()
    } else {
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|ws| {
                    s.spawn(move || {
                        ws.iter()
                            .map(|w| window_gradients(cfg, params, w, lambda, fil_mask))
                            .collect::<Vec<Item>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    };
    let k = batch.len() as f64;
    let mut sum = LossBreakdown {
        recon: 0.0,
        fil: 0.0,
        total: 0.0,
        lambda,
    };
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    for r in results {
        let (b, grads) = r?;
        sum.recon += b.recon / k;
        sum.fil += b.fil / k;
        sum.total += b.total / k;
        for (name, gt) in grads {
            match acc.get_mut(&name) {
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(gt.data()) {
                        *x += y / k;
                    }
                }
                None => {
                    acc.insert(name, gt.map(|v| v / k));
                }
            }
        }
    }
    Ok((sum, acc))
}

/// Mean absolute error on the whitened cells of validation windows, in
/// normalized units.
pub fn validation_mae(
    cfg: &ModelConfig,
    params: &ModelParams,
    windows: &[SpatioTemporalWindow],
) -> Result<Option<f64>> {
    let (mut err, mut count) = (0.0, 0usize);
    for w in windows {
        check_window(cfg, w)?;
        let tod = window_time_of_day(w.start_step, cfg.window, cfg.day_unit);
        let pred = predict(cfg, params, &w.x, &w.input_mask(), &tod)?;
        for ((p, y), m) in pred.data().iter().zip(w.y.data()).zip(w.whiten_mask.data()) {
            if *m != 0.0 {
                err += (p - y).abs();
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| err / count as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub recon: f64,
    pub fil: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_recon: f64,
    pub train_fil: f64,
    /// `None` when there are no validation cells.
    pub val_mae: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainHistory {
    /// `epoch,train_recon,train_fil,val_mae`
    pub fn write_epochs_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,train_recon,train_fil,val_mae")?;
        for e in &self.epochs {
            writeln!(
                f,
                "{},{},{},{}",
                e.epoch,
                e.train_recon,
                e.train_fil,
                fmt_opt(e.val_mae)
            )?;
        }
        f.flush()?;
        Ok(())
    }

    /// `step,recon,fil,total`
    pub fn write_steps_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,recon,fil,total")?;
        for s in &self.steps {
            writeln!(f, "{},{},{},{}", s.step, s.recon, s.fil, s.total)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Training state. Kept as a struct so the caller still holds the last
/// finite parameters after a non-finite loss aborts [`Trainer::fit`].
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: ModelParams,
    /// Parameters before the most recent update.
    pub last_good: ModelParams,
    pub history: TrainHistory,
    pub threads: usize,
    adam: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(model: ModelConfig, params: ModelParams, config: TrainConfig) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let adam = Adam::new(config.beta1, config.beta2, config.eps);
        Ok(Self {
            last_good: params.clone(),
            model,
            config,
            params,
            history: TrainHistory::default(),
            threads: 1,
            adam,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimizer update on `batch` with learning rate `lr`.
    pub fn update(&mut self, batch: &[&SpatioTemporalWindow], lr: f64) -> Result<LossBreakdown> {
        let (loss, mut grads) = batch_gradients(
            &self.model,
            &self.params,
            batch,
            self.config.lambda,
            self.config.fil_mask,
            self.threads,
        )?;
        if !loss.total.is_finite() || grads.values().any(|g| !g.all_finite()) {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        clip_grad_norm(&mut grads, self.config.grad_clip_norm);
        self.last_good = self.params.clone();
        self.adam.step(&mut self.params, &grads, lr);
        if !self.params.all_finite() {
            self.params = self.last_good.clone();
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        self.history.steps.push(StepRecord {
            step: self.step,
            recon: loss.recon,
            fil: loss.fil,
            total: loss.total,
        });
        self.step += 1;
        Ok(loss)
    }

    /// Full training run with per-epoch rewhitening, shuffling, validation
    /// and early stopping. On return `params` holds the best-validation
    /// parameters.
    pub fn fit(
        &mut self,
        train: &mut [SpatioTemporalWindow],
        val: &[SpatioTemporalWindow],
        whiten: &WhitenSpec,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Config("no training windows".into()));
        }
        if whiten.is_zero() {
            return Err(Error::Config(
                "whitening rate 0 leaves nothing to supervise".into(),
            ));
        }
        whiten.validate()?;
        let tc = self.config.clone();
        let per_epoch = train.len().div_ceil(tc.batch);
        let total = per_epoch * tc.max_epochs;
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7261_696e);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut best: Option<(f64, ModelParams, usize)> = None;
        let mut since_best = 0;

        for epoch in 0..tc.max_epochs {
            if epoch > 0 {
                for w in train.iter_mut() {
                    w.whiten_with(whiten, &mut rng);
                }
            }
            order.shuffle(&mut rng);
            let (mut recon, mut fil) = (0.0, 0.0);
            for chunk in order.chunks(tc.batch) {
                let batch: Vec<&SpatioTemporalWindow> = chunk.iter().map(|&i| &train[i]).collect();
                let lr = tc.lr_at(self.step, total);
                let loss = self.update(&batch, lr)?;
                recon += loss.recon / per_epoch as f64;
                fil += loss.fil / per_epoch as f64;
            }
            let val_mae = validation_mae(&self.model, &self.params, val)?;
            // Without validation cells the training loss drives selection.
            let score = val_mae.unwrap_or(recon);
            log::info!(
                "epoch {epoch}: recon {recon:.5} fil {fil:.5} val_mae {}",
                fmt_opt(val_mae)
            );
            self.history.epochs.push(EpochRecord {
                epoch,
                train_recon: recon,
                train_fil: fil,
                val_mae,
            });
            if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
                best = Some((score, self.params.clone(), epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= tc.patience {
                    log::info!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
        if let Some((_, p, e)) = best {
            self.params = p;
            self.history.best_epoch = Some(e);
        }
        Ok(())
    }
}

/// Windows and statistics for one training run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Vec<SpatioTemporalWindow>,
    pub val: Vec<SpatioTemporalWindow>,
    pub normalizer: Normalizer,
    /// Train, validation and test step ranges.
    pub ranges: [Range<usize>; 3],
}

/// Splits the series in time, fits normalization on observed training
/// cells, and builds training (stride `train_stride`) and validation
/// (stride `T`) windows.
pub fn prepare(
    ds: &Dataset,
    obs: &Tensor,
    split: &SplitRatios,
    window: usize,
    train_stride: usize,
    whiten: &WhitenSpec,
    seed: u64,
) -> Result<Prepared> {
    if obs.shape() != ds.values.shape() {
        return Err(Error::shape("prepare", ds.values.shape(), obs.shape()));
    }
    let ranges = split.ranges(ds.n_steps())?;
    let train_ds = ds.slice_steps(ranges[0].clone())?;
    let train_obs = slice_cols(obs, ranges[0].clone())?;
    let normalizer = Normalizer::fit(&train_ds.values, &train_obs)?;
    let train = make_windows(
        &train_ds,
        &train_obs,
        &normalizer,
        window,
        train_stride,
        whiten,
        seed,
    )?;
    let val = if ranges[1].len() >= window {
        let val_ds = ds.slice_steps(ranges[1].clone())?;
        let val_obs = slice_cols(obs, ranges[1].clone())?;
        make_windows(
            &val_ds,
            &val_obs,
            &normalizer,
            window,
            window,
            whiten,
            seed ^ 0x76616c,
        )?
    } else {
        log::warn!("validation split shorter than one window; selecting on training loss");
        Vec::new()
    };
    Ok(Prepared {
        train,
        val,
        normalizer,
        ranges,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputeOptions {
    /// Requested window length; must equal the model's unless `sliding`.
    pub window: Option<usize>,
    /// Run with the model's own window length when `window` differs.
    pub sliding: bool,
    /// Window stride; `None` means the model's window length.
    pub stride: Option<usize>,
}

impl Default for ImputeOptions {
    fn default() -> Self {
        Self {
            window: None,
            sliding: false,
            stride: None,
        }
    }
}

/// Window start positions covering `0..steps`, with an extra end-aligned
/// window when the stride does not land on the end.
fn window_starts(steps: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=steps - window).step_by(stride).collect();
    if starts.last().is_some_and(|&s| s + window < steps) {
        starts.push(steps - window);
    }
    starts
}

/// Completes a series. Observed cells are copied through unchanged; every
/// other cell gets the average model prediction over the windows covering
/// it, de-normalized.
pub fn impute(
    cfg: &ModelConfig,
    params: &ModelParams,
    ds: &Dataset,
    obs: &Tensor,
    norm: &Normalizer,
    opts: &ImputeOptions,
) -> Result<Tensor> {
    let t = cfg.window;
    if let Some(w) = opts.window {
        if w != t && !opts.sliding {
            return Err(Error::Config(format!(
                "window length {w} differs from the checkpoint's {t}; pass the sliding option to run with {t}"
            )));
        }
    }
    if obs.shape() != ds.values.shape() {
        return Err(Error::shape("impute", ds.values.shape(), obs.shape()));
    }
    if ds.n_nodes() != cfg.n_nodes || norm.mean.len() != cfg.n_nodes {
        return Err(Error::Config(format!(
            "dataset has {} sensors, model expects {}",
            ds.n_nodes(),
            cfg.n_nodes
        )));
    }
    let steps = ds.n_steps();
    if steps < t {
        return Err(Error::Config(format!(
            "series of {steps} steps is shorter than the window {t}"
        )));
    }
    let stride = opts.stride.unwrap_or(t);
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let obs = obs.zip_map(
        &ds.available,
        |o, a| if o != 0.0 && a != 0.0 { 1.0 } else { 0.0 },
    )?;
    let normalized = norm.normalize(&ds.values);
    let n = ds.n_nodes();
    let mut acc = Tensor::zeros(&[n, steps]);
    let mut hits = vec![0u32; steps];
    for start in window_starts(steps, t, stride) {
        let mask = slice_cols(&obs, start..start + t)?;
        let x = slice_cols(&normalized, start..start + t)?.zip_map(&mask, |v, m| {
            if m != 0.0 {
                v
            } else {
                0.0
            }
        })?;
        let tod = window_time_of_day(ds.first_step + start, t, cfg.day_unit);
        let pred = predict(cfg, params, &x, &mask, &tod)?;
        for i in 0..n {
            for s in 0..t {
                let cur = acc.at(i, start + s);
                acc.set(i, start + s, cur + pred.at(i, s));
            }
        }
        for h in &mut hits[start..start + t] {
            *h += 1;
        }
    }
    let mean = Tensor::from_fn(&[n, steps], |idx| {
        acc.data()[idx] / hits[idx % steps] as f64
    });
    let pred = norm.denormalize(&mean);
    Ok(splice(&pred, &ds.values, &obs))
}

/// `obs ? observed : pred`, cell by cell.
pub fn splice(pred: &Tensor, observed: &Tensor, obs: &Tensor) -> Tensor {
    Tensor::from_fn(pred.shape(), |i| {
        if obs.data()[i] != 0.0 {
            observed.data()[i]
        } else {
            pred.data()[i]
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
}

/// MAE and RMSE over cells where `eval_mask` is set.
pub fn evaluate(imputed: &Tensor, truth: &Tensor, eval_mask: &Tensor) -> Result<EvalMetrics> {
    if imputed.shape() != truth.shape() {
        return Err(Error::shape("evaluate", imputed.shape(), truth.shape()));
    }
    if eval_mask.shape() != truth.shape() {
        return Err(Error::shape("evaluate", truth.shape(), eval_mask.shape()));
    }
    let (mut abs, mut sq, mut count) = (0.0, 0.0, 0usize);
    for ((p, y), m) in imputed
        .data()
        .iter()
        .zip(truth.data())
        .zip(eval_mask.data())
    {
        if *m != 0.0 {
            let e = p - y;
            abs += e.abs();
            sq += e * e;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoEvaluableCells);
    }
    Ok(EvalMetrics {
        mae: abs / count as f64,
        rmse: (sq / count as f64).sqrt(),
        count,
    })
}

/// Completed series plus metrics and its singular spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputationReport {
    pub imputed: Tensor,
    pub metrics: Option<EvalMetrics>,
    pub spectrum: SingularSpectrum,
}

impl ImputationReport {
    pub fn new(imputed: Tensor, truth: Option<(&Tensor, &Tensor)>) -> Result<Self> {
        let metrics = match truth {
            Some((y, m)) => Some(evaluate(&imputed, y, m)?),
            None => None,
        };
        let spectrum = svd_values(&imputed)?;
        Ok(Self {
            imputed,
            metrics,
            spectrum,
        })
    }
}
