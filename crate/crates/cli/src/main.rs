use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use epicast_cli::config::ExperimentConfig;
use epicast_cli::runner::{self, RunContext};

/// Global probabilistic multi-horizon epidemic forecasting experiments.
#[derive(Parser)]
#[command(name = "epicast", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build and cache aligned per-county panels.
    Preprocess,
    /// Train one model variant; writes checkpoint.json and history.json.
    Train,
    /// Roll the trained model over the test region; writes forecasts.csv
    /// and metrics.json.
    Backtest,
    /// Train and backtest all four variants; writes the comparison table,
    /// metrics.json, and importance.json.
    Ablate,
    /// Aggregate variable-selection weights of a trained fusion
    /// transformer; writes importance.json and importance.svg.
    Explain,
    /// Generate the synthetic epidemic bundle as raw CSVs plus truth.json.
    Synth,
    /// Render per-county forecast plots from forecasts.csv.
    Plot,
}

impl Command {
    fn to_runner(&self) -> runner::Subcommand {
        match self {
            Command::Preprocess => runner::Subcommand::Preprocess,
            Command::Train => runner::Subcommand::Train,
            Command::Backtest => runner::Subcommand::Backtest,
            Command::Ablate => runner::Subcommand::Ablate,
            Command::Explain => runner::Subcommand::Explain,
            Command::Synth => runner::Subcommand::Synth,
            Command::Plot => runner::Subcommand::Plot,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config_path) = &cli.config else {
        eprintln!("error: --config <path> is required");
        return ExitCode::from(2);
    };
    let config = match ExperimentConfig::load(config_path) {
        Ok(c) => c.with_overrides(cli.out_dir.clone(), cli.seed),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let ctx = match RunContext::new(config) {
        Ok(ctx) => ctx,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match runner::run(cli.command.to_runner(), &ctx) {
        Ok(artifacts) => {
            for artifact in artifacts {
                println!("{}", artifact.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
