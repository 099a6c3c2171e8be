//! Command-line front end for the prefopt laboratory.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 a threshold check
//! failed, 3 a run aborted.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use prefopt::experiments::ProbeLambdas;
use prefopt::optim::TrainMode;
use prefopt::{LossKind, PairMode};

mod commands;
mod config;

pub use config::SEED_ENV;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_THRESHOLD: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Abort(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Abort(_) => EXIT_ABORT,
        }
    }
}

impl From<prefopt::Error> for CliError {
    fn from(e: prefopt::Error) -> Self {
        use prefopt::Error as E;
        match e {
            E::NonFinite { .. } | E::Convergence { .. } | E::Io { .. } => CliError::Abort(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

/// Comma-separated method names, or `all` for the five presets.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodList(pub Vec<LossKind>);

fn parse_methods(s: &str) -> Result<MethodList, String> {
    if s.trim() == "all" {
        return Ok(MethodList(LossKind::PRESETS.to_vec()));
    }
    s.split(',')
        .map(|m| m.trim().parse::<LossKind>().map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()
        .map(MethodList)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FloatList(pub Vec<f64>);

fn parse_floats(s: &str) -> Result<FloatList, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| format!("`{v}` is not a number")))
        .collect::<Result<Vec<_>, _>>()
        .map(FloatList)
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("must be a finite number > 0, got {v}")),
        Err(_) => Err(format!("`{s}` is not a number")),
    }
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be >= 1".into()),
        Ok(v) => Ok(v),
        Err(_) => Err(format!("`{s}` is not a positive integer")),
    }
}

/// Clip threshold, or `none` to disable clipping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Clip(pub Option<f64>);

fn parse_clip(s: &str) -> Result<Clip, String> {
    if s == "none" {
        Ok(Clip(None))
    } else {
        positive_f64(s).map(|v| Clip(Some(v)))
    }
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse::<TrainMode>().map_err(|e| e.to_string())
}

fn parse_pairs(s: &str) -> Result<PairMode, String> {
    s.parse::<PairMode>().map_err(|e| e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "prefopt", version, about = "Tabular preference-optimization laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sweep methods and lambdas on the single-prompt interpolation instance.
    Interp(SweepArgs),
    /// Sweep methods and lambdas on the two-prompt preservation instance.
    Preserve(SweepArgs),
    /// Train on total-order labels under two reference policies.
    Degeneracy(DegeneracyArgs),
    /// Train chosen methods on a given instance or dataset.
    Train(TrainArgs),
    /// Compare analytic gradients with central differences on random cases.
    Gradcheck(GradcheckArgs),
    /// Sample a labeled preference dataset.
    GenData(GenDataArgs),
}

/// Training flags shared by every training subcommand. Flags override
/// `--config`; the seed falls back to the config, then PREFOPT_SEED, then 0.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// population or sampled [default: population]
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<TrainMode>,
    /// Step budget (f-DPO runs three times this in sweeps) [default: 1000]
    #[arg(long, value_parser = positive_usize)]
    pub steps: Option<usize>,
    /// Adam learning rate [default: 1e-3; EXPO 5e-4 in sweeps]
    #[arg(long, allow_negative_numbers = true, value_parser = positive_f64)]
    pub lr: Option<f64>,
    /// Tuples per minibatch in sampled mode [default: 20]
    #[arg(long, value_parser = positive_usize)]
    pub batch: Option<usize>,
    /// Gradient max-norm, or `none` [default: 10]
    #[arg(long, allow_negative_numbers = true, value_parser = parse_clip)]
    pub clip: Option<Clip>,
    /// RNG seed [default: $PREFOPT_SEED, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file of config fields, plus optional "methods" and "lambdas"
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output root directory
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    /// Comma-separated methods or `all` [default: all]
    #[arg(long, value_parser = parse_methods)]
    pub methods: Option<MethodList>,
    /// Comma-separated lambda grid; EXPO_REG values are clamped into [0, 1]
    /// [default: 1e-5,1e-3,1e-2,1e-1,1,10,100; EXPO_REG 0,0.1,...,1]
    #[arg(long, allow_negative_numbers = true, value_parser = parse_floats)]
    pub lambdas: Option<FloatList>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug, Clone)]
pub struct DegeneracyArgs {
    /// First reference policy
    #[arg(long, value_parser = parse_floats, default_value = "0.4,0.4,0.2")]
    pub ref_a: FloatList,
    /// Second reference policy
    #[arg(long, value_parser = parse_floats, default_value = "0.2,0.3,0.5")]
    pub ref_b: FloatList,
    /// DPO lambda
    #[arg(long, value_parser = positive_f64, default_value_t = ProbeLambdas::default().dpo)]
    pub dpo_lambda: f64,
    /// f-DPO lambda
    #[arg(long, value_parser = positive_f64, default_value_t = ProbeLambdas::default().fdpo_js)]
    pub fdpo_lambda: f64,
    /// EXPO_REG control lambda
    #[arg(long, default_value_t = ProbeLambdas::default().expo_reg)]
    pub expo_reg_lambda: f64,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Comma-separated methods or `all` [default: all]
    #[arg(long, value_parser = parse_methods)]
    pub methods: Option<MethodList>,
    /// Comma-separated lambdas, each applied to every method [default: 0.1]
    #[arg(long, allow_negative_numbers = true, value_parser = parse_floats)]
    pub lambdas: Option<FloatList>,
    /// Instance JSON [default: the interpolation instance]
    #[arg(long)]
    pub instance: Option<PathBuf>,
    /// Preference dataset CSV to train on instead of sampling
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    /// Comma-separated methods or `all`
    #[arg(long, value_parser = parse_methods, default_value = "all")]
    pub methods: MethodList,
    /// Random cases per method
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// RNG seed [default: $PREFOPT_SEED, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root directory
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    /// Instance JSON [default: the interpolation instance]
    #[arg(long)]
    pub instance: Option<PathBuf>,
    /// Number of tuples
    #[arg(long, value_parser = positive_usize, default_value_t = 1000)]
    pub n: usize,
    /// uniform-pairs or ref-product
    #[arg(long, value_parser = parse_pairs, default_value = "uniform-pairs")]
    pub pairs: PairMode,
    /// RNG seed [default: $PREFOPT_SEED, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root directory
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Diagnostics go to stderr, results to stdout.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
