//! `gpo-lab`: run the preference-optimization experiments from the shell.
//!
//! Exit codes: 0 success, 1 invalid input or failed check, 2 numeric
//! divergence, 64 usage error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::Outcome;

const EXIT_INVALID: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(
    name = "gpo-lab",
    version,
    about = "Generalized preference optimization experiments"
)]
struct Cli {
    /// Worker threads for parallel cells (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the loss table as CSV.
    Losses(LossesArgs),
    /// Train a tabular policy on a preference dataset.
    Train(TrainArgs),
    /// Three-action bandit with deterministic preferences.
    Bandit(BanditArgs),
    /// Shift scan of the Gaussian-mixture counterexample.
    Gaussians(GaussiansArgs),
    /// Pointwise reward fits and their consistency suites.
    Rewards(RewardsArgs),
    /// Over-optimization sweep on a synthetic golden instance.
    Goodhart(GoodhartArgs),
    /// Run the full invariant suite.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
pub struct LossesArgs {
    /// Also write `losses.csv` and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML or JSON file with the training config and data paths.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    minibatch: Option<usize>,
    /// Dataset JSON `{"pairs": [[c,w,l],...], "weights": [...]}`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Reference policy JSON `{"contexts", "actions", "logits"}`.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Initial policy JSON; defaults to the reference.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BanditArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    losses: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    betas: Option<Vec<f64>>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GaussiansArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo samples per estimate.
    #[arg(long)]
    n: Option<usize>,
    /// Number of shift values on [-1, 1].
    #[arg(long)]
    grid: Option<usize>,
    /// Odd window for local-minimum detection.
    #[arg(long)]
    window: Option<usize>,
    /// Search this many seeds starting at --seed and keep the first hit.
    #[arg(long)]
    search: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum SuiteName {
    Bayes,
    Bt,
    Equivalence,
    All,
}

#[derive(Args, Debug)]
pub struct RewardsArgs {
    /// Run a built-in suite and print a pass/fail table.
    #[arg(long, value_enum, conflicts_with = "prefs")]
    check: Option<SuiteName>,
    /// Preference matrix JSON (array of rows) to fit a reward to.
    #[arg(long)]
    prefs: Option<PathBuf>,
    #[arg(long, default_value = "logistic")]
    loss: String,
    /// Behaviour distribution over responses; uniform if omitted.
    #[arg(long, value_delimiter = ',', num_args = 1.., conflicts_with = "mu_file")]
    mu: Option<Vec<f64>>,
    #[arg(long)]
    mu_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GoodhartArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    losses: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    betas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    lrs: Option<Vec<f64>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    instance_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    /// Also write `checks.json` and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: cannot start {jobs} worker threads: {e}");
            return ExitCode::from(EXIT_INVALID);
        }
    }
    let result = match &cli.command {
        Command::Losses(a) => commands::losses(a),
        Command::Train(a) => commands::train(a),
        Command::Bandit(a) => commands::bandit(a),
        Command::Gaussians(a) => commands::gaussians(a),
        Command::Rewards(a) => commands::rewards(a),
        Command::Goodhart(a) => commands::goodhart(a),
        Command::Check(a) => commands::check(a),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Diverged) => ExitCode::from(EXIT_DIVERGED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INVALID)
        }
    }
}
