//! `segcons`: generate shapes datasets, train and evaluate semi-supervised
//! segmentation runs, and report multi-seed results.

mod commands;
mod config;
mod plot;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use segcons::consistency::ConsistencyMode;
use segcons::Error;

use config::Overrides;

pub const OUT_ENV: &str = "SEGCONS_OUT";

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric abort: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e.to_string()),
            Error::NonFiniteLoss { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "segcons", version, about = "Semi-supervised segmentation with consistency regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a shapes dataset file.
    Gen(GenArgs),
    /// Train one or more seeds of an experiment.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Tabulate and plot completed runs.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct GenArgs {
    /// Experiment config; only `data_seed` and `[generate]` are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file. A list of overlaps writes one file per value, suffixed
    /// `_k<κ>`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Colour overlap κ, or a comma-separated sweep.
    #[arg(long, value_delimiter = ',')]
    overlap: Vec<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file; without it the dataset is generated from the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output root; defaults to `$SEGCONS_OUT`, then `./runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<ConsistencyMode>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_enum)]
    colour_aug: Option<Switch>,
    #[arg(long)]
    labelled: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// First training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Colour overlap κ of a generated dataset.
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
    /// Experiment directory name; defaults to one derived from the config.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Evaluate on the training pool instead of the validation set.
    #[arg(long)]
    train_split: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, or directories containing them.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Where the table, CSV and plots go; defaults to the output root.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            mode: self.mode,
            gamma: self.gamma,
            colour_aug: self.colour_aug.map(|s| matches!(s, Switch::On)),
            labelled: self.labelled,
            steps: self.steps,
            lr: self.lr,
            seed: self.seed,
            seeds: self.seeds,
            overlap: self.overlap,
            data_seed: self.data_seed,
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen(a) => commands::gen(a.config.as_deref(), &a.out, a.seed, &a.overlap),
        Command::Train(a) => {
            let o = a.overrides();
            let root = config::output_root(a.out.clone());
            commands::train(a.config.as_deref(), a.dataset.as_deref(), &root, a.name.as_deref(), &o)
        }
        Command::Eval(a) => commands::eval(&a.checkpoint, &a.dataset, a.train_split),
        Command::Report(a) => {
            let out = config::output_root(a.out);
            report::report(&a.runs, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("segcons: {e}");
            ExitCode::from(e.code())
        }
    }
}
