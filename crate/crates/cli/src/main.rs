//! Command-line front end: one subcommand per pipeline stage, a TOML
//! config file underneath, flags on top, and every artifact stamped with
//! the resolved configuration.
//!
//! Exit codes: 0 on success, 2 for anything wrong with the inputs (flags,
//! files, shapes), 3 when a computation failed integrity checks (fusion
//! verification mismatch, solver divergence).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spanfuse::selection::Metric;
use spanfuse::solvers::{RegKind, SolverKind};

/// Environment variable holding the log filter (same syntax as RUST_LOG).
const LOG_ENV_VAR: &str = "REPLACEME_LOG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    /// Unconstrained least squares on the normal equations.
    Ls,
    /// Least squares with an L2 penalty of strength --alpha.
    Ridge,
    /// Diagonal transform, one scalar per channel.
    Diag,
    /// Orthogonal transform (rotation/reflection).
    Ortho,
    /// Cosine-distance objective minimized with Adam.
    Cosine,
}

impl From<SolverArg> for SolverKind {
    fn from(arg: SolverArg) -> SolverKind {
        match arg {
            SolverArg::Ls => SolverKind::Ls,
            SolverArg::Ridge => SolverKind::Ridge,
            SolverArg::Diag => SolverKind::Diag,
            SolverArg::Ortho => SolverKind::Ortho,
            SolverArg::Cosine => SolverKind::CosineGd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    /// Mean per-token cosine distance between hidden states.
    Cosine,
    /// Mean per-token Euclidean distance.
    L2,
}

impl From<MetricArg> for Metric {
    fn from(arg: MetricArg) -> Metric {
        match arg {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::L2 => Metric::L2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegArg {
    None,
    L1,
    L2,
}

impl From<RegArg> for RegKind {
    fn from(arg: RegArg) -> RegKind {
        match arg {
            RegArg::None => RegKind::None,
            RegArg::L1 => RegKind::L1,
            RegArg::L2 => RegKind::L2,
        }
    }
}

/// Flags shared by every subcommand. Unset flags fall back to the config
/// file, then to built-in defaults.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Model checkpoint to load; omit to build a seeded in-memory model.
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,

    /// TOML config file; flags override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Calibration token file (binary RTOK or whitespace-separated text).
    #[arg(long, value_name = "PATH")]
    pub calib: Option<PathBuf>,

    /// Synthesize N calibration sequences instead of reading a file.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,

    /// Span length: how many consecutive blocks one cut removes.
    #[arg(long)]
    pub n: Option<usize>,

    /// Explicit cut plan "start:span,start:span"; skips selection.
    #[arg(long, value_name = "I:N,I:N")]
    pub groups: Option<String>,

    /// Estimation routine for the replacement transform.
    #[arg(long, value_enum)]
    pub solver: Option<SolverArg>,

    /// Distance metric for scoring candidate cuts.
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,

    /// Ridge strength, or regularizer weight for the cosine solver.
    #[arg(long)]
    pub alpha: Option<f64>,

    /// Regularizer for the cosine solver.
    #[arg(long, value_enum)]
    pub reg: Option<RegArg>,

    /// Epochs for the cosine solver.
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Learning rate for the cosine solver.
    #[arg(long)]
    pub lr: Option<f64>,

    /// Token batch size for the cosine solver.
    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Fraction of calibration tokens replaced by the mask id.
    #[arg(long, value_name = "FRACTION")]
    pub mask: Option<f64>,

    /// Seed for every random draw in the run.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Directory for artifacts (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Skip the fused-vs-explicit equivalence check.
    #[arg(long)]
    pub no_verify: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Saved transform file, repeated once per group in --groups.
    #[arg(long = "transform", value_name = "PATH", required = true)]
    pub transforms: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Baseline checkpoint; adds a relative-performance ratio.
    #[arg(long, value_name = "PATH")]
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Also evaluate perplexity after an identity-transform removal of
    /// each candidate span (adds the loss column).
    #[arg(long)]
    pub with_loss: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every candidate cut of span --n and report the best start.
    Select(CommonArgs),
    /// Estimate replacement transforms for a cut and save them.
    Estimate(CommonArgs),
    /// Cut, estimate, fuse, verify; saves the pruned checkpoint.
    Prune(CommonArgs),
    /// Re-check saved transforms: fused model vs explicit reference.
    Verify(VerifyArgs),
    /// Perplexity of a model on a token set.
    Eval(EvalArgs),
    /// Distance table over every candidate start (CSV + JSON).
    Sweep(SweepArgs),
}

/// Depth pruning for toy transformer checkpoints: find a contiguous run
/// of blocks that does the least work, replace it with one linear map
/// folded into the previous block, and measure what survives.
#[derive(Debug, Parser)]
#[command(name = "spanfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV_VAR, "info"))
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::Select(args) => commands::select(args),
        Command::Estimate(args) => commands::estimate(args),
        Command::Prune(args) => commands::prune(args),
        Command::Verify(args) => commands::verify(args),
        Command::Eval(args) => commands::eval(args),
        Command::Sweep(args) => commands::sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_input_class() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
