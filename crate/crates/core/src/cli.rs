//! The `stimpute` command line. Machine output goes to stdout, logs and
//! JSON error records to stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{impute_als, impute_linear, impute_mean, AlsConfig};
use crate::bench::{bench, AttentionKind, BenchConfig};
use crate::data::{
    apply_missing, load_csv, load_mask_csv, save_csv, save_mask_csv, synth_lowrank, Dataset,
    MissingKind, MissingPatternSpec, Normalizer, SplitRatios, SynthSpec,
};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig, ModelParams};
use crate::spectral::svd_values;
use crate::tensor::Tensor;
use crate::training::{
    evaluate, impute, prepare, ImputeOptions, TrainConfig, TrainHistory, Trainer,
};

/// Overrides every seed of a run when set.
pub const SEED_ENV: &str = "STIMPUTE_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NAN: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "stimpute",
    version,
    about = "Spatiotemporal imputation toolkit"
)]
struct Cli {
    /// Maximum worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Pattern {
    Point,
    Block,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Mean,
    Linear,
    Als,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Attention {
    Temporal,
    Spatial,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a low-rank synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 32)]
        nodes: usize,
        #[arg(long, default_value_t = 2880)]
        steps: usize,
        #[arg(long, default_value_t = 5)]
        rank: usize,
        /// Noise standard deviation relative to the signal's.
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 24)]
        steps_per_day: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Simulate an observation mask (1 = observed).
    Mask {
        #[arg(long, value_enum, default_value_t = Pattern::Point)]
        pattern: Pattern,
        /// Point-missing rate.
        #[arg(long, default_value_t = 0.25)]
        rate: f64,
        #[arg(long, default_value_t = 0.05)]
        drop_rate: f64,
        #[arg(long, default_value_t = 0.0015)]
        failure_prob: f64,
        #[arg(long, default_value_t = 12)]
        min_duration: usize,
        #[arg(long, default_value_t = 48)]
        max_duration: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train a model from a JSON run configuration.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Output directory for checkpoint, resolved config and history.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Complete a series with a trained model or a baseline.
    Impute {
        /// Checkpoint file or training output directory.
        #[arg(short, long, required_unless_present = "baseline")]
        model: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "model")]
        baseline: Option<Baseline>,
        #[arg(long, default_value_t = 5)]
        als_rank: usize,
        #[arg(long, default_value_t = 0.1)]
        als_reg: f64,
        #[arg(long, default_value_t = 50)]
        als_iters: usize,
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Expected window length; must match the checkpoint unless --sliding.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        sliding: bool,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// MAE/RMSE on cells missing from the mask but present in the truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
    /// Singular values and cumulative energy of a matrix.
    Spectrum {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Attention timing table.
    Bench {
        #[arg(long, value_enum, default_value_t = Attention::Temporal)]
        attention: Attention,
        #[arg(long, value_delimiter = ',', default_values_t = vec![128, 256, 512])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Nodes for temporal runs, steps for spatial runs.
        #[arg(long, default_value_t = 8)]
        fixed: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
    },
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset CSV, relative to the config file.
    pub data: PathBuf,
    /// Observation mask CSV; simulated from `missing` when absent.
    pub mask: Option<PathBuf>,
    pub steps_per_day: usize,
    /// Seeds parameter initialization and whitening.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub missing: MissingPatternSpec,
    pub split: SplitRatios,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data.csv"),
            mask: None,
            steps_per_day: 24,
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            missing: MissingPatternSpec::default(),
            split: SplitRatios::default(),
        }
    }
}

impl RunConfig {
    /// Takes the sensor count and day length from `ds`, then validates.
    pub fn fit_to(&mut self, ds: &Dataset) -> Result<()> {
        if self.model.n_nodes != ds.n_nodes() {
            log::info!("model n_nodes set to the dataset's {}", ds.n_nodes());
            self.model.n_nodes = ds.n_nodes();
        }
        self.model.day_unit = self.steps_per_day;
        self.model.validate().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })?;
        self.train.validate()?;
        self.missing.validate()
    }
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    spec: &'a SynthSpec,
    sensors: usize,
    steps: usize,
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::Contract(_) => "contract",
        Error::Numeric(_) => "numeric",
        Error::Parse { .. } => "parse",
        Error::Config(_) => "config",
        Error::NoEvaluableCells => "no_evaluable_cells",
        Error::NonFiniteLoss { .. } => "non_finite_loss",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteLoss { .. } => EXIT_NAN,
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .try_init();
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            let rec = ErrorRecord {
                error: error_kind(&e),
                message: e.to_string(),
                exit_code: code,
            };
            eprintln!("{}", serde_json::to_string(&rec).expect("plain record"));
            code
        }
    }
}

fn print_json(v: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let seed_env = seed_override()?;
    match &cli.command {
        Command::Synth {
            nodes,
            steps,
            rank,
            noise,
            steps_per_day,
            seed,
            output,
        } => {
            let spec = SynthSpec {
                nodes: *nodes,
                steps: *steps,
                rank: *rank,
                noise: *noise,
                steps_per_day: *steps_per_day,
                seed: seed_env.unwrap_or(*seed),
            };
            let ds = synth_lowrank(&spec)?;
            save_csv(&ds, output)?;
            let manifest = SynthManifest {
                spec: &spec,
                sensors: ds.n_nodes(),
                steps: ds.n_steps(),
            };
            std::fs::write(
                output.with_extension("json"),
                serde_json::to_string_pretty(&manifest)? + "\n",
            )?;
            Ok(())
        }
        Command::Mask {
            pattern,
            rate,
            drop_rate,
            failure_prob,
            min_duration,
            max_duration,
            seed,
            input,
            output,
        } => {
            let ds = load_csv(input, 24)?;
            let spec = MissingPatternSpec {
                kind: match pattern {
                    Pattern::Point => MissingKind::Point,
                    Pattern::Block => MissingKind::Block,
                },
                point_rate: *rate,
                drop_rate: *drop_rate,
                failure_prob: *failure_prob,
                duration: (*min_duration, *max_duration),
                seed: seed_env.unwrap_or(*seed),
                ..MissingPatternSpec::default()
            };
            spec.validate()?;
            let obs = apply_missing(&ds, &spec)?;
            save_mask_csv(&obs, &ds.sensor_ids, output)
        }
        Command::Train { config, output } => train_command(config, output, cli.threads, seed_env),
        Command::Impute {
            model,
            baseline,
            als_rank,
            als_reg,
            als_iters,
            input,
            mask,
            output,
            window,
            sliding,
            stride,
        } => {
            let opts = ImputeOptions {
                window: *window,
                sliding: *sliding,
                stride: *stride,
            };
            let ckpt = model
                .as_ref()
                .map(|m| Checkpoint::load(checkpoint_path(m)))
                .transpose()?;
            let day_unit = ckpt.as_ref().map_or(24, |c| c.config.day_unit);
            let ds = load_csv(input, day_unit)?;
            let obs = read_mask(mask, &ds)?;
            let out = match (&ckpt, baseline) {
                (Some(ckpt), _) => {
                    let norm = normalizer_from(ckpt)?;
                    impute(&ckpt.config, &ckpt.params, &ds, &obs, &norm, &opts)?
                }
                (None, Some(Baseline::Mean)) => impute_mean(&ds.values, &obs)?,
                (None, Some(Baseline::Linear)) => impute_linear(&ds.values, &obs)?,
                (None, Some(Baseline::Als)) => {
                    let cfg = AlsConfig {
                        rank: *als_rank,
                        reg: *als_reg,
                        iters: *als_iters,
                        seed: seed_env.unwrap_or(0),
                    };
                    impute_als(&ds.values, &obs, &cfg)?.imputed
                }
                (None, None) => return Err(Error::Config("need --model or --baseline".into())),
            };
            let mut res = Dataset::new(out, Tensor::ones(ds.values.shape()), day_unit)?;
            res.sensor_ids = ds.sensor_ids;
            save_csv(&res, output)
        }
        Command::Eval { pred, truth, mask } => {
            let p = load_csv(pred, 24)?;
            let y = load_csv(truth, 24)?;
            let obs = read_mask(mask, &y)?;
            if p.values.shape() != y.values.shape() {
                return Err(Error::shape("eval", p.values.shape(), y.values.shape()));
            }
            let eval_mask = y.available.zip_map(&obs, |a, o| a * (1.0 - o))?;
            let missing_pred = p.available.zip_map(&eval_mask, |a, e| e * (1.0 - a))?;
            if missing_pred.sum() > 0.0 {
                return Err(Error::Contract(
                    "prediction has empty cells where the truth is evaluated".into(),
                ));
            }
            print_json(&evaluate(&p.values, &y.values, &eval_mask)?)
        }
        Command::Spectrum { input, output } => {
            let ds = load_csv(input, 24)?;
            if ds.available.sum() < ds.available.len() as f64 {
                log::warn!("matrix has empty cells; treating them as 0");
            }
            let sv = svd_values(&ds.values)?;
            let energy = sv.cumulative_energy();
            let mut f = std::io::BufWriter::new(std::fs::File::create(output)?);
            writeln!(f, "index,singular_value,cumulative_energy")?;
            for (i, (s, e)) in sv.values.iter().zip(&energy).enumerate() {
                writeln!(f, "{},{},{}", i + 1, s, e)?;
            }
            f.flush()?;
            Ok(())
        }
        Command::Bench {
            attention,
            sizes,
            reps,
            fixed,
            dim,
        } => {
            let bc = BenchConfig {
                fixed: *fixed,
                model_dim: *dim,
                reps: *reps,
                seed: seed_env.unwrap_or(0),
                ..BenchConfig::default()
            };
            let kind = match attention {
                Attention::Temporal => AttentionKind::Temporal,
                Attention::Spatial => AttentionKind::Spatial,
            };
            let rows = bench(kind, sizes, &bc)?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "attention,variant,size,seconds")?;
            for r in rows {
                let kind = match r.attention {
                    AttentionKind::Temporal => "temporal",
                    AttentionKind::Spatial => "spatial",
                };
                writeln!(out, "{kind},{},{},{:.6e}", r.variant, r.size, r.seconds)?;
            }
            Ok(())
        }
    }
}

fn read_mask(path: &Path, ds: &Dataset) -> Result<Tensor> {
    let m = load_mask_csv(path)?;
    if m.shape() != ds.values.shape() {
        return Err(Error::shape("mask vs data", m.shape(), ds.values.shape()));
    }
    Ok(m)
}

/// A directory resolves to its `model.ckpt`.
fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("model.ckpt")
    } else {
        p.to_path_buf()
    }
}

/// The normalizer saved by [`train_from_config`].
pub fn normalizer_from(ckpt: &Checkpoint) -> Result<Normalizer> {
    let get = |k: &str| {
        ckpt.aux
            .get(k)
            .map(|t| t.data().to_vec())
            .ok_or_else(|| Error::Config(format!("checkpoint lacks {k}")))
    };
    Ok(Normalizer {
        mean: get("norm.mean")?,
        std: get("norm.std")?,
    })
}

/// Reads and resolves a run configuration: data-dependent fields are filled
/// in and the seed override applied.
pub fn resolve_config(path: &Path, seed_env: Option<u64>) -> Result<(RunConfig, Dataset, Tensor)> {
    let text = std::fs::read_to_string(path)?;
    let mut rc: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    rc.data = base.join(&rc.data);
    rc.mask = rc.mask.map(|m| base.join(m));
    if let Some(s) = seed_env {
        rc.seed = s;
        rc.train.seed = s;
        rc.missing.seed = s;
    }
    let ds = load_csv(&rc.data, rc.steps_per_day)?;
    rc.fit_to(&ds)?;
    let obs = match &rc.mask {
        Some(m) => read_mask(m, &ds)?,
        None => apply_missing(&ds, &rc.missing)?,
    };
    Ok((rc, ds, obs))
}

/// Result of [`train_from_config`]. `checkpoint` holds the best parameters,
/// or the last finite ones when `status` is a non-finite-loss error.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub status: Result<()>,
}

/// Trains a model on `ds` under `obs` as described by a resolved `rc`. The
/// normalizer is stored in the checkpoint's aux tensors.
pub fn train_from_config(
    rc: &RunConfig,
    ds: &Dataset,
    obs: &Tensor,
    threads: usize,
) -> Result<TrainOutcome> {
    let t = rc.model.window;
    let stride = rc.train.train_stride.unwrap_or((t / 2).max(1));
    let prep = prepare(
        ds,
        obs,
        &rc.split,
        t,
        stride,
        &rc.missing.whiten,
        rc.seed.wrapping_add(1),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(rc.seed);
    let params = ModelParams::init(&rc.model, &mut rng)?;
    let mut trainer = Trainer::new(rc.model.clone(), params, rc.train.clone())?;
    trainer.threads = threads.max(1);
    let mut train = prep.train;
    let mut aux = BTreeMap::new();
    let n = prep.normalizer.mean.len();
    aux.insert(
        "norm.mean".to_string(),
        Tensor::new(vec![n], prep.normalizer.mean.clone())?,
    );
    aux.insert(
        "norm.std".to_string(),
        Tensor::new(vec![n], prep.normalizer.std.clone())?,
    );
    let status = match trainer.fit(&mut train, &prep.val, &rc.missing.whiten) {
        Err(e @ Error::NonFiniteLoss { .. }) => Err(e),
        Err(e) => return Err(e),
        Ok(()) => Ok(()),
    };
    let params = match &status {
        Err(Error::NonFiniteLoss { step }) => {
            log::error!("non-finite loss at step {step}; keeping last finite parameters");
            trainer.last_good.clone()
        }
        _ => trainer.params.clone(),
    };
    let checkpoint = Checkpoint {
        config: rc.model.clone(),
        params,
        seed: rc.seed,
        step: trainer.steps_taken() as u64,
        aux,
    };
    Ok(TrainOutcome {
        checkpoint,
        history: trainer.history,
        status,
    })
}

fn train_command(
    config: &Path,
    output: &Path,
    threads: usize,
    seed_env: Option<u64>,
) -> Result<()> {
    let (rc, ds, obs) = resolve_config(config, seed_env)?;
    std::fs::create_dir_all(output)?;
    std::fs::write(
        output.join("config.json"),
        serde_json::to_string_pretty(&rc)? + "\n",
    )?;
    let out = train_from_config(&rc, &ds, &obs, threads)?;
    out.history.write_epochs_csv(output.join("history.csv"))?;
    out.history.write_steps_csv(output.join("steps.csv"))?;
    out.checkpoint.save(output.join("model.ckpt"))?;
    out.status
}
