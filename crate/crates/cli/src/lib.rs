//! Command-line surface for `dipl-core`: synthetic data, fitting, prediction,
//! evaluation and class-wise cross-validation over CSV/JSON datasets.
//!
//! Exit codes: 0 on success, 2 on a usage error, 1 on a data or numeric error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dipl_core::{Hyperparams, LossMode, MetricMode};

mod commands;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "dipl",
    version,
    about = "Transductive zero-shot projection learning"
)]
pub struct Cli {
    /// Worker threads for the parallel loss and Gram kernels.
    #[arg(long, global = true, env = "DIPL_THREADS", default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: u16,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Fit a projection and write w.csv, trace.json and metadata.json.
    Fit(FitCmd),
    /// Write ranked labels for every test sample.
    Predict(PredictCmd),
    /// Score predictions against held-out truth labels.
    Eval(EvalCmd),
    /// Class-wise cross-validation over alpha and the superclass count.
    Cv(CvCmd),
    /// Fit, predict and evaluate in one run.
    Pipeline(PipelineCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "bidirectional")]
    Bidirectional,
    #[value(name = "reverse_only")]
    ReverseOnly,
    #[value(name = "forward_only")]
    ForwardOnly,
}

impl From<ModeArg> for LossMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Bidirectional => LossMode::Bidirectional,
            ModeArg::ReverseOnly => LossMode::ReverseOnly,
            ModeArg::ForwardOnly => LossMode::ForwardOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    #[value(name = "per_sample")]
    PerSample,
    #[value(name = "per_class")]
    PerClass,
    #[value(name = "both")]
    Both,
}

fn unit_interval_open_right(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is not in [0, 1)"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be non-negative"))
    }
}

fn decay_value(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not in (0, 1]"))
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 6)]
    pub p: usize,
    #[arg(long, default_value_t = 4)]
    pub q: usize,
    #[arg(long, default_value_t = 20)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 0.1, value_parser = non_negative)]
    pub noise: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    pub shift: f64,
    /// Draw prototypes in this many well-separated groups.
    #[arg(long)]
    pub groups: Option<usize>,
    /// Hold out this fraction of labelled samples as a seen-class test set.
    #[arg(long, value_parser = unit_interval_open_right)]
    pub holdout: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// L2-normalise features and prototypes after loading.
    #[arg(long)]
    pub normalize: bool,
    /// Mix held-out seen samples into the test pool and score over all classes.
    #[arg(long)]
    pub generalized: bool,
    /// Output directory; defaults to the manifest's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval_open_right)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.01, value_parser = positive)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.99, value_parser = decay_value)]
    pub decay: f64,
    #[arg(long, default_value_t = 50)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6, value_parser = non_negative)]
    pub w_tol: f64,
    #[arg(long, default_value_t = 1e-12, value_parser = non_negative)]
    pub tie_tol: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Bidirectional)]
    pub mode: ModeArg,
    /// Ignore the unlabelled pool (alpha is then unused).
    #[arg(long)]
    pub inductive: bool,
    /// Number of k-means superclasses; enables candidate-restricted fitting.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub superclasses: Option<u64>,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub top_m: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl FitArgs {
    pub fn hyperparams(&self, metric: MetricArg) -> Hyperparams {
        Hyperparams {
            alpha: self.alpha,
            beta: self.beta,
            decay: self.decay,
            max_iters: self.max_iters,
            w_tol: self.w_tol,
            tie_tol: self.tie_tol,
            loss_mode: self.mode.into(),
            transductive: !self.inductive,
            candidate_top_m: self.top_m as usize,
            superclass_r: self.superclasses.map(|r| r as usize),
            metric_mode: match metric {
                MetricArg::PerClass => MetricMode::PerClass,
                _ => MetricMode::PerSample,
            },
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum, default_value_t = MetricArg::Both)]
    pub metric: MetricArg,
    /// Also report hit@k.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub hit_k: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct FitCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Clone, Args)]
pub struct PredictCmd {
    #[command(flatten)]
    pub data: DataArgs,
    /// Projection CSV; defaults to w.csv in the output directory.
    #[arg(long)]
    pub w: Option<PathBuf>,
    /// Loss used for ranking; defaults to the mode recorded next to the projection.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Projection CSV; defaults to w.csv in the output directory.
    #[arg(long)]
    pub w: Option<PathBuf>,
    /// Score an existing predictions CSV instead of predicting from a projection.
    #[arg(long, conflicts_with = "w")]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Debug, Clone, Args)]
pub struct CvCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Comma-separated alpha grid.
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8")]
    pub alphas: Vec<f64>,
    /// Comma-separated superclass counts to try in addition to plain fitting.
    #[arg(long, value_delimiter = ',')]
    pub superclass_grid: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
    #[arg(long, value_enum, default_value_t = MetricArg::PerClass)]
    pub metric: MetricArg,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let recorded: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads as usize)
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_DATA;
        }
    };
    match pool.install(|| commands::run(&cli, &recorded)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_DATA
        }
    }
}
