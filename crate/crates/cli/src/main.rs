//! `ecotoll` command line: data generation, embedding, training,
//! evaluation, prediction, the lookup baseline and ablation sweeps.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "ecotoll", version, about = "Eco-toll estimation for road paths")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Parent directory of run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Seed for every random stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Config override, e.g. `experiment.train.max_epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a grid network, simulated trips and the split plan.
    GenData(GenDataArgs),
    /// Train segment embeddings on a generated network.
    Embed(DataArgs),
    /// Train one model on one repeat of the split.
    Train(TrainArgs),
    /// Evaluate a trained model on the test trips.
    Evaluate(EvaluateArgs),
    /// Train and evaluate every configured method over the repeats.
    Experiment(ExperimentArgs),
    /// Predict energy and time for queries in a JSON-lines file.
    Predict(PredictArgs),
    /// Evaluate the lookup-table baseline over the repeats.
    Baseline(BaselineArgs),
    /// Run an ablation sweep.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub trips: Option<usize>,
    /// Also write the dense speed profiles.
    #[arg(long)]
    pub profiles: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Output directory of `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Decoder {
    Physics,
    Linear,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Embedding CSV written by `embed`.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub repeat: usize,
    #[arg(long, value_enum, default_value = "physics")]
    pub decoder: Decoder,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub label_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory holding `nodes.csv` and `segments.csv`.
    #[arg(long)]
    pub network: PathBuf,
    /// One query per line: `{"path": [...], "departure": {...}, "vehicle": {...}}`.
    #[arg(long)]
    pub queries: PathBuf,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepArg {
    Jerk,
    EnergyWeight,
    Window,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, value_enum)]
    pub kind: SweepArg,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = RunConfig::load(cli.config.as_deref(), &cli.overrides).and_then(|mut cfg| {
        if cli.seed.is_some() {
            cfg.seed = cli.seed;
            cfg.apply_seed();
        }
        commands::run(&cli, cfg)
    });
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ecotoll: {e}");
            ExitCode::from(e.code())
        }
    }
}
