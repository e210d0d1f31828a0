//! Command-line driver: dataset generation, training and evaluation for both
//! synthetic tasks, the attention-approximation verifier, and the
//! complexity benchmark. Every run writes `metrics.json`, `metrics.csv` and
//! a `config.snapshot` that reproduces it.

mod commands;
mod config;
mod outputs;

use clap::{Parser, Subcommand};
use config::{CommonFlags, RunConfig, Task};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ctattn",
    about = "Continuous-time attention: synthetic experiments and verifiers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: CommonFlags,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a spiral dataset (JSON lines).
    GenSpiral,
    /// Train a model on spirals and report interpolation/extrapolation error.
    TrainSpiral,
    /// Evaluate a spiral checkpoint.
    EvalSpiral,
    /// Generate synthetic event sequences (JSON lines).
    GenMtpp,
    /// Train the event model and report log-likelihood metrics.
    TrainMtpp,
    /// Evaluate an event-model checkpoint.
    EvalMtpp,
    /// Numerically verify the attention-approximation construction.
    VerifyTheorem,
    /// Measure attention wall time and solver evaluations versus length.
    Bench,
}

/// Exit code 2: configuration problems. Exit code 1: runtime failures.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn config(msg: String) -> Self {
        CliError::Config(msg)
    }
}

impl From<ctattn_core::Error> for CliError {
    fn from(e: ctattn_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let task = match cli.command {
        Command::GenSpiral => Task::GenSpiral,
        Command::TrainSpiral => Task::TrainSpiral,
        Command::EvalSpiral => Task::EvalSpiral,
        Command::GenMtpp => Task::GenMtpp,
        Command::TrainMtpp => Task::TrainMtpp,
        Command::EvalMtpp => Task::EvalMtpp,
        Command::VerifyTheorem => Task::VerifyTheorem,
        Command::Bench => Task::Bench,
    };
    let result = RunConfig::resolve(task, &cli.flags).and_then(|cfg| run(task, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ctattn: {e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}

fn run(task: Task, cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", cfg.out.display())))?;
    std::fs::write(cfg.out.join("config.snapshot"), cfg.snapshot(task))
        .map_err(|e| CliError::Runtime(format!("write config.snapshot: {e}")))?;
    match task {
        Task::GenSpiral => commands::spiral::generate(cfg),
        Task::TrainSpiral => commands::spiral::train(cfg),
        Task::EvalSpiral => commands::spiral::evaluate(cfg),
        Task::GenMtpp => commands::mtpp::generate(cfg),
        Task::TrainMtpp => commands::mtpp::train(cfg),
        Task::EvalMtpp => commands::mtpp::evaluate(cfg),
        Task::VerifyTheorem => commands::verify::run(cfg),
        Task::Bench => commands::bench::run(cfg),
    }
}
