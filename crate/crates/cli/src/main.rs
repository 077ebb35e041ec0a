//! `catmerge`: generate synthetic suites, merge, evaluate, measure conflict
//! and inspect containers.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

mod commands;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "catmerge", version, about = "Conflict-aware merging of task vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-task suite.
    Gen(GenArgs),
    /// Merge the fine-tuned models of a suite.
    Merge(MergeArgs),
    /// Evaluate a model on every task of a suite.
    Eval(EvalArgs),
    /// Write a pairwise conflict grid as CSV.
    Conflict(ConflictArgs),
    /// List the tensors of a container.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON suite config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub conflict_strength: Option<f64>,
    #[arg(long)]
    pub exemplars: Option<usize>,
    #[arg(long)]
    pub train_samples: Option<usize>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    #[arg(long)]
    pub finetune_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Average,
    Ta,
    TiesMag,
    Cat,
    Lsq,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub suite: PathBuf,
    /// Merged container path; the report goes to `<out>.report.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// JSON merge config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub c: Option<usize>,
    #[arg(long)]
    pub exemplars: Option<usize>,
    /// Keep non-positive eigen-directions too.
    #[arg(long)]
    pub keep_nonpositive: bool,
    /// Fraction of entries `ties-mag` keeps per task vector.
    #[arg(long)]
    pub keep_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long)]
    pub json: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ConflictMethod {
    Ta,
    Cat,
}

#[derive(Debug, Args)]
pub struct ConflictArgs {
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long)]
    pub task_a: usize,
    #[arg(long)]
    pub task_b: usize,
    /// Points per axis over [0, 1].
    #[arg(long, default_value_t = 11)]
    pub grid: usize,
    #[arg(long, value_enum, default_value_t = ConflictMethod::Ta)]
    pub method: ConflictMethod,
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub c: Option<usize>,
    #[arg(long)]
    pub exemplars: Option<usize>,
    /// Also write per-layer shift diagnostics at unit weights.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub file: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

/// A usage problem found after argument parsing; exits with code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(Usage(msg.into()).into())
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("CATMERGE_THREADS") else { return Ok(()) };
    let n: usize = match v.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => return usage(format!("CATMERGE_THREADS must be a positive integer, got {v:?}")),
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Merge(a) => commands::merge(a),
        Command::Eval(a) => commands::eval(a),
        Command::Conflict(a) => commands::conflict(a),
        Command::Inspect(a) => commands::inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
