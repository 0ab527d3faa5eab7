#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use graphmtl::graph::GraphFormat;
use graphmtl::synth::Structure;
use graphmtl::{Error, Variant};

mod report;
mod tools;
mod train;

#[derive(Debug, Parser)]
#[command(
    name = "graphmtl",
    version,
    about = "Multi-task regression with a learned task graph"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a known task structure.
    Synth(SynthArgs),
    /// Run an experiment config and write the fit and a metrics report.
    Train(TrainArgs),
    /// Score a saved fit on a per-task CSV directory.
    Eval(EvalArgs),
    /// Write the learned graph of a saved fit as DOT or JSON.
    ExportGraph(ExportArgs),
    /// Time each pipeline stage over growing task counts.
    Bench(BenchArgs),
    /// Compare the closed-form hypergradient with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub structure: Structure,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Rows per task.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for `fit.json` and `report.json`.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub train_ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep the initial k-NN graph fixed (no outer iterations).
    #[arg(long)]
    pub baseline: bool,
    /// Edges below this weight are dropped before scoring the graph.
    #[arg(long, default_value_t = 1e-3)]
    pub prune: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub fit: PathBuf,
    /// Directory of per-task CSV files.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "y")]
    pub target: String,
    /// Reference graph JSON for veracity scores.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-3)]
    pub prune: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, default_value = "dot")]
    pub format: GraphFormat,
    #[arg(long, default_value_t = 1e-3)]
    pub prune: f64,
    /// Color nodes by Markov clusters of the pruned graph.
    #[arg(long)]
    pub cluster: bool,
    #[arg(long, default_value_t = 2.0)]
    pub inflation: f64,
    /// Written to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [25, 50, 100, 200])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub d: usize,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Training and validation rows per task.
    #[arg(long, default_value_t = 40)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub d: usize,
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    pub xi: f64,
    #[arg(long, default_value_t = 0.1)]
    pub eta: f64,
    #[arg(long, default_value_t = 0.2)]
    pub gamma: f64,
    #[arg(long, default_value = "sq_l2")]
    pub variant: Variant,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Adds this offset to the first closed-form coordinate.
    #[arg(long, hide = true)]
    pub corrupt_gradient: Option<f64>,
}

fn init_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("GGMTL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "GGMTL_THREADS must be a positive integer, got '{raw}'"
        ))
    })?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

/// Outcome of a command that ran to completion but may still signal failure.
pub enum Outcome {
    Ok,
    NumericalFailure,
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    init_threads()?;
    match cli.command {
        Command::Synth(a) => tools::synth(&a),
        Command::Train(a) => train::train(&a),
        Command::Eval(a) => train::eval(&a),
        Command::ExportGraph(a) => tools::export_graph(&a),
        Command::Bench(a) => tools::bench(&a),
        Command::GradCheck(a) => tools::grad_check(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::NumericalFailure) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
