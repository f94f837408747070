//! Command-line driver for the claim-prediction pipeline.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(
    name = "telerisk",
    version,
    about = "Telematics anomaly features for claim prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random step; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Covariance ridge for Mahalanobis detectors; overrides the config.
    #[arg(long, global = true)]
    ridge: Option<f64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write a synthetic portfolio and its train/test split.
    Simulate,
    /// Score trips and write anomaly profiles and features.
    Profile,
    /// Grid-search detector hyperparameters.
    TuneDetector,
    /// Grid-search the elastic-net penalty.
    TuneModel,
    /// Fit the claim models on the training vehicles.
    Train,
    /// Score the test vehicles and write the evaluation table.
    Evaluate,
    /// Write plot-ready ROC, coefficient, score and correlation files.
    Report,
    /// Run every stage in order.
    All,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(r) = cli.ridge {
        config.detector.ridge_eps = r;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("telerisk-out"));
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let seed = cli.seed.unwrap_or(config.seed);
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let ctx = Context { config, out, seed };
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Profile => commands::profile(&ctx),
        Command::TuneDetector => commands::tune_detectors(&ctx),
        Command::TuneModel => commands::tune_models(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Evaluate => commands::evaluate(&ctx),
        Command::Report => commands::report(&ctx),
        Command::All => {
            commands::simulate(&ctx)?;
            commands::tune_detectors(&ctx)?;
            commands::profile(&ctx)?;
            commands::tune_models(&ctx)?;
            commands::train(&ctx)?;
            commands::evaluate(&ctx)?;
            commands::report(&ctx)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
