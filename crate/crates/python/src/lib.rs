//! Python bindings. Matrices cross the boundary as lists of rows
//! (`[[f64; steps]; nodes]`); `NaN` marks a missing value on input.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use stimpute::baselines::{run_baseline, AlsConfig, BaselineKind};
use stimpute::cli::{normalizer_from, train_from_config, RunConfig};
use stimpute::data::{apply_missing, synth_lowrank, Dataset, MissingPatternSpec, SynthSpec};
use stimpute::model::Checkpoint;
use stimpute::training::{evaluate as eval_metrics, impute, ImputeOptions, TrainHistory};
use stimpute::{spectral, Error, Tensor};

create_exception!(stimpute_py, StimputeError, PyException);

pub type Matrix = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    StimputeError::new_err(e.to_string())
}

/// Row lists to a tensor; rows must have equal length.
pub fn to_tensor(rows: &[Vec<f64>]) -> Result<Tensor, Error> {
    let n = rows.len();
    let t = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != t) {
        return Err(Error::Contract(format!(
            "row {i} has {} values, row 0 has {t}",
            r.len()
        )));
    }
    Tensor::new(vec![n, t], rows.concat())
}

pub fn to_rows(t: &Tensor) -> Matrix {
    let cols = t.shape().get(1).copied().unwrap_or(0);
    t.data().chunks(cols.max(1)).map(<[f64]>::to_vec).collect()
}

/// A dataset whose availability mask is the non-`NaN` cells.
pub fn to_dataset(rows: &[Vec<f64>], steps_per_day: usize) -> Result<Dataset, Error> {
    let raw = to_tensor(rows)?;
    let available = raw.map(|v| if v.is_nan() { 0.0 } else { 1.0 });
    let values = raw.map(|v| if v.is_nan() { 0.0 } else { v });
    Dataset::new(values, available, steps_per_day)
}

/// Low-rank periodic synthetic data.
#[pyfunction]
#[pyo3(signature = (nodes=32, steps=2880, rank=5, noise=0.1, steps_per_day=24, seed=0))]
fn synth(
    nodes: usize,
    steps: usize,
    rank: usize,
    noise: f64,
    steps_per_day: usize,
    seed: u64,
) -> PyResult<Matrix> {
    let ds = synth_lowrank(&SynthSpec {
        nodes,
        steps,
        rank,
        noise,
        steps_per_day,
        seed,
    })
    .map_err(py_err)?;
    Ok(to_rows(&ds.values))
}

/// Observation mask (1 = observed) for `pattern` "point" or "block".
#[pyfunction]
#[pyo3(signature = (values, pattern="point", rate=0.25, seed=0))]
fn simulate_missing(values: Matrix, pattern: &str, rate: f64, seed: u64) -> PyResult<Matrix> {
    let ds = to_dataset(&values, 24).map_err(py_err)?;
    let spec = match pattern {
        "point" => MissingPatternSpec::point(rate, seed),
        "block" => MissingPatternSpec::block(seed),
        other => {
            return Err(StimputeError::new_err(format!(
                "unknown pattern {other:?}; use \"point\" or \"block\""
            )))
        }
    };
    apply_missing(&ds, &spec)
        .map(|m| to_rows(&m))
        .map_err(py_err)
}

/// `(Σ|DFT(x)|, nuclear norm of the circulant of x)`.
#[pyfunction]
fn lemma1_check(x: Vec<f64>) -> PyResult<(f64, f64)> {
    spectral::lemma1_check(&x).map_err(py_err)
}

/// Singular values in descending order.
#[pyfunction]
fn singular_values(matrix: Matrix) -> PyResult<Vec<f64>> {
    let m = to_tensor(&matrix).map_err(py_err)?;
    spectral::svd_values(&m).map(|s| s.values).map_err(py_err)
}

/// `Σ|DFT₂(x)| / (N·T)`.
#[pyfunction]
fn spectral_l1(matrix: Matrix) -> PyResult<f64> {
    let m = to_tensor(&matrix).map_err(py_err)?;
    spectral::spectral_l1(&m).map_err(py_err)
}

/// MAE, RMSE and cell count where `eval_mask` is 1.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    pred: Matrix,
    truth: Matrix,
    eval_mask: Matrix,
) -> PyResult<Bound<'py, PyDict>> {
    let t = |m: &Matrix| to_tensor(m).map_err(py_err);
    let m = eval_metrics(&t(&pred)?, &t(&truth)?, &t(&eval_mask)?).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("mae", m.mae)?;
    d.set_item("rmse", m.rmse)?;
    d.set_item("count", m.count)?;
    Ok(d)
}

/// Completion by "mean", "linear" or "als".
#[pyfunction]
#[pyo3(signature = (values, mask, kind="mean", rank=5, reg=0.1, iters=50, seed=0))]
fn impute_baseline(
    values: Matrix,
    mask: Matrix,
    kind: &str,
    rank: usize,
    reg: f64,
    iters: usize,
    seed: u64,
) -> PyResult<Matrix> {
    let kind = match kind {
        "mean" => BaselineKind::Mean,
        "linear" => BaselineKind::LinearInterp,
        "als" => BaselineKind::AlsMf(AlsConfig {
            rank,
            reg,
            iters,
            seed,
        }),
        other => {
            return Err(StimputeError::new_err(format!(
                "unknown baseline {other:?}; use \"mean\", \"linear\" or \"als\""
            )))
        }
    };
    let ds = to_dataset(&values, 24).map_err(py_err)?;
    let obs = to_tensor(&mask).map_err(py_err)?;
    run_baseline(&kind, &ds.values, &obs)
        .map(|m| to_rows(&m))
        .map_err(py_err)
}

/// A trained imputation model.
#[pyclass(module = "stimpute_py")]
pub struct Model {
    ckpt: Checkpoint,
    history: TrainHistory,
}

#[pymethods]
impl Model {
    /// Trains on `values` observed under `mask`. `config` is a JSON run
    /// configuration; its `data` and `mask` paths are ignored.
    #[staticmethod]
    #[pyo3(signature = (values, mask, config=None, threads=1))]
    fn train(values: Matrix, mask: Matrix, config: Option<&str>, threads: usize) -> PyResult<Self> {
        let mut rc: RunConfig = match config {
            Some(text) => {
                serde_json::from_str(text).map_err(|e| py_err(Error::Config(e.to_string())))?
            }
            None => RunConfig::default(),
        };
        let ds = to_dataset(&values, rc.steps_per_day).map_err(py_err)?;
        let obs = to_tensor(&mask).map_err(py_err)?;
        rc.fit_to(&ds).map_err(py_err)?;
        let out = train_from_config(&rc, &ds, &obs, threads).map_err(py_err)?;
        out.status.map_err(py_err)?;
        Ok(Self {
            ckpt: out.checkpoint,
            history: out.history,
        })
    }

    /// Completes `values`; observed cells are returned unchanged.
    #[pyo3(signature = (values, mask, stride=None))]
    fn impute(&self, values: Matrix, mask: Matrix, stride: Option<usize>) -> PyResult<Matrix> {
        let ds = to_dataset(&values, self.ckpt.config.day_unit).map_err(py_err)?;
        let obs = to_tensor(&mask).map_err(py_err)?;
        let norm = normalizer_from(&self.ckpt).map_err(py_err)?;
        let opts = ImputeOptions {
            stride,
            ..ImputeOptions::default()
        };
        impute(
            &self.ckpt.config,
            &self.ckpt.params,
            &ds,
            &obs,
            &norm,
            &opts,
        )
        .map(|m| to_rows(&m))
        .map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.ckpt.save(path).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            ckpt: Checkpoint::load(path).map_err(py_err)?,
            history: TrainHistory::default(),
        })
    }

    #[getter]
    fn window(&self) -> usize {
        self.ckpt.config.window
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.ckpt.config.n_nodes
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.ckpt.step
    }

    /// `(epoch, train_recon, train_fil, val_mae)` per trained epoch; empty
    /// for a loaded model.
    #[getter]
    fn epochs(&self) -> Vec<(usize, f64, f64, Option<f64>)> {
        self.history
            .epochs
            .iter()
            .map(|e| (e.epoch, e.train_recon, e.train_fil, e.val_mae))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(n_nodes={}, window={}, steps={})",
            self.ckpt.config.n_nodes, self.ckpt.config.window, self.ckpt.step
        )
    }
}

/// Adds the functions, `Model` and `StimputeError` to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("StimputeError", m.py().get_type::<StimputeError>())?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_missing, m)?)?;
    m.add_function(wrap_pyfunction!(lemma1_check, m)?)?;
    m.add_function(wrap_pyfunction!(singular_values, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_l1, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(impute_baseline, m)?)?;
    Ok(())
}

#[pymodule]
fn stimpute_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
