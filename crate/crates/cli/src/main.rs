//! `femtocache` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::RunContext;
use config::ExperimentConfig;

/// Environment variable holding the log filter, e.g. `info` or `debug`.
const LOG_ENV: &str = "FEMTOCACHE_LOG";

#[derive(Parser)]
#[command(name = "femtocache", version, about = "Proactive femto-caching experiments")]
struct Cli {
    /// JSON experiment configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding all inputs and outputs of a run.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace or ingest a request log into a popularity series.
    GenData {
        /// A `period,file_id` request log to ingest instead of the configured source.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Slide the window over the series, split records and draw training samples.
    Split,
    /// Train the primal-dual model.
    TrainUnsup {
        /// Where to write the checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Label samples with the static solver and train the supervised model.
    TrainSup {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fit the linear popularity predictor.
    FitPreopt {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate strategies against the genie bound on per-period test samples.
    Evaluate {
        /// Directory with the strategy checkpoints (defaults to the output directory).
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Comma-separated strategies to evaluate.
        #[arg(long, value_delimiter = ',', default_values_t = commands::ALL_STRATEGIES.map(String::from))]
        strategies: Vec<String>,
    },
    /// Compare the closed form with the network simulator.
    ValidateApprox,
    /// Solve the static problem for one popularity vector.
    SolveStatic {
        /// Zipf exponent of the catalog popularity.
        #[arg(long, conflicts_with = "popularity")]
        zipf: Option<f64>,
        /// Comma-separated popularity weights (normalized before solving).
        #[arg(long, value_delimiter = ',')]
        popularity: Option<Vec<f64>>,
    },
    /// Print the default configuration as JSON.
    DefaultConfig,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::DefaultConfig = cli.command {
        println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default())?);
        return Ok(());
    }
    let ctx = RunContext::new(cfg, cli.out_dir)?;
    match cli.command {
        Command::GenData { log } => commands::gen_data(&ctx, log),
        Command::Split => commands::split(&ctx),
        Command::TrainUnsup { checkpoint } => commands::train_unsup(&ctx, checkpoint),
        Command::TrainSup { checkpoint } => commands::train_sup(&ctx, checkpoint),
        Command::FitPreopt { checkpoint } => commands::fit_preopt(&ctx, checkpoint),
        Command::Evaluate {
            checkpoint_dir,
            strategies,
        } => commands::evaluate_cmd(&ctx, checkpoint_dir, &strategies),
        Command::ValidateApprox => commands::validate_approx(&ctx),
        Command::SolveStatic { zipf, popularity } => commands::solve_static(&ctx, zipf, popularity),
        Command::DefaultConfig => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or(LOG_ENV, "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
