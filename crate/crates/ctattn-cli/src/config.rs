//! Effective run configuration: built-in defaults, overridden by a flat
//! key-value config file, overridden by command-line flags. The same grammar
//! is written back out as `config.snapshot`, so any run can be reproduced by
//! pointing `--config` at its snapshot.

use crate::CliError;
use clap::Args;
use ctattn_core::model::ModelConfig;
use ctattn_core::ode::{Activation, FieldNorm, SolverConfig};
use ctattn_core::quadrature::QuadratureRule;
use ctattn_core::tasks::spiral::WhichModel;
use ctattn_core::SplineKind;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Command-line overrides shared by every subcommand.
#[derive(Args, Debug, Default, Clone)]
pub struct CommonFlags {
    /// Flat key-value config file; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (falls back to $CTATTN_SEED, then 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// RK4 step size on the dummy interval.
    #[arg(long, global = true)]
    pub step_size: Option<f64>,
    /// Score quadrature: `linear` or `gauss:P` with P in 2..=5.
    #[arg(long, global = true)]
    pub quadrature: Option<String>,
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    #[arg(long, global = true)]
    pub d_model: Option<usize>,
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    /// Mask keys after the query time.
    #[arg(long, global = true)]
    pub causal: bool,
    /// Disable interval normalization (raw integrals).
    #[arg(long, global = true)]
    pub no_normalize: bool,
    /// Keep raw time stamps instead of mapping them onto [0, 1].
    #[arg(long, global = true)]
    pub no_time_normalize: bool,
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Output directory for metrics, snapshots and checkpoints.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// `contiformer` or `transformer`.
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Query interpolant: `cubic` or `linear`.
    #[arg(long, global = true)]
    pub query_kind: Option<String>,
    /// Vector-field activation: `tanh` or `sigmoid`.
    #[arg(long, global = true)]
    pub activation: Option<String>,
    /// Vector-field form: `concat` or `concatnorm`.
    #[arg(long, global = true)]
    pub field_norm: Option<String>,
    /// Share one key/value field pair across heads.
    #[arg(long, global = true)]
    pub shared_fields: bool,
    /// Dataset file (JSON lines) to load instead of generating.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Trajectories / sequences to generate.
    #[arg(long, global = true)]
    pub count: Option<usize>,
    #[arg(long, global = true)]
    pub train_count: Option<usize>,
    #[arg(long, global = true)]
    pub test_count: Option<usize>,
    /// Spiral parameter spread (standard deviation).
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Spiral training-noise standard deviation.
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    /// Observed points per spiral (from the first half).
    #[arg(long, global = true)]
    pub n_obs: Option<usize>,
    /// Supervised points sampled per trajectory per iteration.
    #[arg(long, global = true)]
    pub queries_per_iter: Option<usize>,
    /// Stride of filled anchor tokens at unseen spiral positions (0 = none).
    #[arg(long, global = true)]
    pub anchor_stride: Option<usize>,
    /// Monte-Carlo samples per inter-event interval.
    #[arg(long, global = true)]
    pub mc_samples: Option<usize>,
    /// Comma-separated sequence lengths for `bench`.
    #[arg(long, global = true)]
    pub lengths: Option<String>,
    /// Timing repetitions per length for `bench`.
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    /// Random targets for `verify-theorem`.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Comma-separated sequence sizes for `verify-theorem`.
    #[arg(long, global = true)]
    pub n: Option<String>,
    /// Comma-separated dimensions for `verify-theorem`.
    #[arg(long, global = true)]
    pub d: Option<String>,
}

/// Fully resolved configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub model: WhichModel,
    pub step_size: f64,
    pub quadrature: String,
    pub heads: usize,
    pub layers: usize,
    pub d_model: usize,
    pub dropout: f64,
    pub causal: bool,
    pub normalize: bool,
    pub time_normalize: bool,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub out: PathBuf,
    pub workers: usize,
    pub query_kind: String,
    pub activation: String,
    pub field_norm: String,
    pub shared_fields: bool,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub count: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub alpha: f64,
    pub beta: f64,
    pub n_obs: usize,
    pub queries_per_iter: usize,
    pub anchor_stride: usize,
    pub mc_samples: usize,
    pub lengths: Vec<usize>,
    pub repeats: usize,
    pub trials: usize,
    pub verify_n: Vec<usize>,
    pub verify_d: Vec<usize>,
}

/// Per-task defaults where tasks genuinely differ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    GenSpiral,
    TrainSpiral,
    EvalSpiral,
    GenMtpp,
    TrainMtpp,
    EvalMtpp,
    VerifyTheorem,
    Bench,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::GenSpiral => "gen-spiral",
            Task::TrainSpiral => "train-spiral",
            Task::EvalSpiral => "eval-spiral",
            Task::GenMtpp => "gen-mtpp",
            Task::TrainMtpp => "train-mtpp",
            Task::EvalMtpp => "eval-mtpp",
            Task::VerifyTheorem => "verify-theorem",
            Task::Bench => "bench",
        }
    }

    fn is_spiral(&self) -> bool {
        matches!(self, Task::GenSpiral | Task::TrainSpiral | Task::EvalSpiral)
    }

    fn is_mtpp(&self) -> bool {
        matches!(self, Task::GenMtpp | Task::TrainMtpp | Task::EvalMtpp)
    }
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "model",
    "step_size",
    "quadrature",
    "heads",
    "layers",
    "d_model",
    "dropout",
    "causal",
    "normalize",
    "time_normalize",
    "iters",
    "batch",
    "lr",
    "out",
    "workers",
    "query_kind",
    "activation",
    "field_norm",
    "shared_fields",
    "data",
    "checkpoint",
    "count",
    "train_count",
    "test_count",
    "alpha",
    "beta",
    "n_obs",
    "queries_per_iter",
    "anchor_stride",
    "mc_samples",
    "lengths",
    "repeats",
    "trials",
    "n",
    "d",
];

fn parse_list(s: &str, key: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::config(format!("{key}: `{p}` is not a positive integer")))
        })
        .collect()
}

impl RunConfig {
    /// Resolve defaults <- config file <- flags for the given task.
    pub fn resolve(task: Task, flags: &CommonFlags) -> Result<RunConfig, CliError> {
        let file = match &flags.config {
            Some(path) => parse_config_file(path)?,
            None => BTreeMap::new(),
        };
        for key in file.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::config(format!("unknown config key `{key}`")));
            }
        }
        let get = |key: &str| file.get(key).cloned();
        let parse_f64 = |key: &str| -> Result<Option<f64>, CliError> {
            get(key)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| CliError::config(format!("{key}: `{v}` is not a number")))
                })
                .transpose()
        };
        let parse_usize = |key: &str| -> Result<Option<usize>, CliError> {
            get(key)
                .map(|v| {
                    v.parse::<usize>()
                        .map_err(|_| CliError::config(format!("{key}: `{v}` is not an integer")))
                })
                .transpose()
        };
        let parse_u64 = |key: &str| -> Result<Option<u64>, CliError> {
            get(key)
                .map(|v| {
                    v.parse::<u64>()
                        .map_err(|_| CliError::config(format!("{key}: `{v}` is not an integer")))
                })
                .transpose()
        };
        let parse_bool = |key: &str| -> Result<Option<bool>, CliError> {
            get(key)
                .map(|v| {
                    v.parse::<bool>()
                        .map_err(|_| CliError::config(format!("{key}: `{v}` is not true/false")))
                })
                .transpose()
        };

        let env_seed = std::env::var("CTATTN_SEED")
            .ok()
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|_| CliError::config(format!("CTATTN_SEED: `{v}` is not an integer")))
            })
            .transpose()?;
        let seed = flags.seed.or(parse_u64("seed")?).or(env_seed).unwrap_or(0);

        let model_str = flags
            .model
            .clone()
            .or(get("model"))
            .unwrap_or_else(|| "contiformer".to_string());
        let model: WhichModel = model_str
            .parse()
            .map_err(|e| CliError::config(format!("model: {e}")))?;

        let default_dropout = if task.is_spiral() { 0.0 } else { 0.1 };
        let default_query_kind = if task.is_spiral() { "linear" } else { "cubic" };
        let default_causal = task.is_mtpp();
        let default_iters = if task.is_spiral() { 1500 } else { 200 };
        let default_batch = if task.is_spiral() { 32 } else { 16 };
        let default_count = if task.is_mtpp() { 500 } else { 300 };
        let default_train = if task.is_mtpp() { 100 } else { 200 };
        let default_test = if task.is_mtpp() { 25 } else { 100 };

        let cfg = RunConfig {
            seed,
            model,
            step_size: flags.step_size.or(parse_f64("step_size")?).unwrap_or(0.1),
            quadrature: flags
                .quadrature
                .clone()
                .or(get("quadrature"))
                .unwrap_or_else(|| "linear".to_string()),
            heads: flags.heads.or(parse_usize("heads")?).unwrap_or(2),
            layers: flags.layers.or(parse_usize("layers")?).unwrap_or(1),
            d_model: flags.d_model.or(parse_usize("d_model")?).unwrap_or(16),
            dropout: flags
                .dropout
                .or(parse_f64("dropout")?)
                .unwrap_or(default_dropout),
            causal: flags.causal || parse_bool("causal")?.unwrap_or(default_causal),
            normalize: !flags.no_normalize && parse_bool("normalize")?.unwrap_or(true),
            time_normalize: !flags.no_time_normalize
                && parse_bool("time_normalize")?.unwrap_or(true),
            iters: flags
                .iters
                .or(parse_usize("iters")?)
                .unwrap_or(default_iters),
            batch: flags
                .batch
                .or(parse_usize("batch")?)
                .unwrap_or(default_batch),
            lr: flags.lr.or(parse_f64("lr")?).unwrap_or(1e-2),
            out: flags
                .out
                .clone()
                .or(get("out").map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out")),
            workers: flags
                .workers
                .or(parse_usize("workers")?)
                .unwrap_or_else(|| {
                    std::thread::available_parallelism()
                        .map(|n| n.get())
                        .unwrap_or(1)
                }),
            query_kind: flags
                .query_kind
                .clone()
                .or(get("query_kind"))
                .unwrap_or_else(|| default_query_kind.to_string()),
            activation: flags
                .activation
                .clone()
                .or(get("activation"))
                .unwrap_or_else(|| "tanh".to_string()),
            field_norm: flags
                .field_norm
                .clone()
                .or(get("field_norm"))
                .unwrap_or_else(|| "concatnorm".to_string()),
            shared_fields: flags.shared_fields || parse_bool("shared_fields")?.unwrap_or(false),
            data: flags.data.clone().or(get("data").map(PathBuf::from)),
            checkpoint: flags
                .checkpoint
                .clone()
                .or(get("checkpoint").map(PathBuf::from)),
            count: flags
                .count
                .or(parse_usize("count")?)
                .unwrap_or(default_count),
            train_count: flags
                .train_count
                .or(parse_usize("train_count")?)
                .unwrap_or(default_train),
            test_count: flags
                .test_count
                .or(parse_usize("test_count")?)
                .unwrap_or(default_test),
            alpha: flags.alpha.or(parse_f64("alpha")?).unwrap_or(0.02),
            beta: flags.beta.or(parse_f64("beta")?).unwrap_or(0.1),
            n_obs: flags.n_obs.or(parse_usize("n_obs")?).unwrap_or(30),
            queries_per_iter: flags
                .queries_per_iter
                .or(parse_usize("queries_per_iter")?)
                .unwrap_or(12),
            anchor_stride: flags
                .anchor_stride
                .or(parse_usize("anchor_stride")?)
                .unwrap_or(4),
            mc_samples: flags
                .mc_samples
                .or(parse_usize("mc_samples")?)
                .unwrap_or(20),
            lengths: match flags.lengths.clone().or(get("lengths")) {
                Some(s) => parse_list(&s, "lengths")?,
                None => vec![16, 32, 64, 128],
            },
            repeats: flags.repeats.or(parse_usize("repeats")?).unwrap_or(3),
            trials: flags.trials.or(parse_usize("trials")?).unwrap_or(10),
            verify_n: match flags.n.clone().or(get("n")) {
                Some(s) => parse_list(&s, "n")?,
                None => vec![2, 3, 4],
            },
            verify_d: match flags.d.clone().or(get("d")) {
                Some(s) => parse_list(&s, "d")?,
                None => vec![2, 3],
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.step_size.is_nan() || self.step_size <= 0.0 {
            return Err(CliError::config(format!(
                "step_size: must be positive, got {}",
                self.step_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CliError::config(format!(
                "dropout: must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(CliError::config(format!(
                "d_model: {} must be a positive multiple of heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.batch == 0 || self.workers == 0 {
            return Err(CliError::config("batch/workers: must be positive".into()));
        }
        self.quadrature
            .parse::<QuadratureRule>()
            .map_err(|e| CliError::config(format!("quadrature: {e}")))?;
        self.query_kind
            .parse::<SplineKind>()
            .map_err(|e| CliError::config(format!("query_kind: {e}")))?;
        self.activation
            .parse::<Activation>()
            .map_err(|e| CliError::config(format!("activation: {e}")))?;
        self.field_norm
            .parse::<FieldNorm>()
            .map_err(|e| CliError::config(format!("field_norm: {e}")))?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        Ok(ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            ffn_hidden: 4 * self.d_model,
            dropout: self.dropout,
            causal: self.causal,
            normalize: self.normalize,
            time_normalize: self.time_normalize,
            rule: self
                .quadrature
                .parse()
                .map_err(|e| CliError::config(format!("quadrature: {e}")))?,
            solver: SolverConfig::new(self.step_size)
                .map_err(|e| CliError::config(format!("step_size: {e}")))?,
            query_kind: self
                .query_kind
                .parse()
                .map_err(|e| CliError::config(format!("query_kind: {e}")))?,
            shared_fields: self.shared_fields,
            activation: self
                .activation
                .parse()
                .map_err(|e| CliError::config(format!("activation: {e}")))?,
            field_norm: self
                .field_norm
                .parse()
                .map_err(|e| CliError::config(format!("field_norm: {e}")))?,
        })
    }

    /// Flat key-value serialization; loadable back through `--config`.
    pub fn snapshot(&self, task: Task) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {} run configuration", task.name());
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut kv: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            (
                "model",
                match self.model {
                    WhichModel::Contiformer => "contiformer".into(),
                    WhichModel::Transformer => "transformer".into(),
                },
            ),
            ("step_size", self.step_size.to_string()),
            ("quadrature", self.quadrature.clone()),
            ("heads", self.heads.to_string()),
            ("layers", self.layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("dropout", self.dropout.to_string()),
            ("causal", self.causal.to_string()),
            ("normalize", self.normalize.to_string()),
            ("time_normalize", self.time_normalize.to_string()),
            ("iters", self.iters.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", self.lr.to_string()),
            ("workers", self.workers.to_string()),
            ("query_kind", self.query_kind.clone()),
            ("activation", self.activation.clone()),
            ("field_norm", self.field_norm.clone()),
            ("shared_fields", self.shared_fields.to_string()),
            ("count", self.count.to_string()),
            ("train_count", self.train_count.to_string()),
            ("test_count", self.test_count.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("n_obs", self.n_obs.to_string()),
            ("queries_per_iter", self.queries_per_iter.to_string()),
            ("anchor_stride", self.anchor_stride.to_string()),
            ("mc_samples", self.mc_samples.to_string()),
            ("lengths", join(&self.lengths)),
            ("repeats", self.repeats.to_string()),
            ("trials", self.trials.to_string()),
            ("n", join(&self.verify_n)),
            ("d", join(&self.verify_d)),
        ];
        if let Some(p) = &self.data {
            kv.push(("data", p.display().to_string()));
        }
        if let Some(p) = &self.checkpoint {
            kv.push(("checkpoint", p.display().to_string()));
        }
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::config(format!(
                "config line {}: expected `key = value`, got `{raw}`",
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}
