use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use inkdiff_cli::commands;
use inkdiff_cli::config::{self, load_config};
use inkdiff_cli::CliError;

/// Glyph-conditional handwriting diffusion pipeline.
#[derive(Parser)]
#[command(name = "inkdiff", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path overrides, e.g. --set training.lr=1e-4 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic glyph dataset directory.
    GenDataset(ConfigArgs),
    /// Train the denoiser on the seen categories of a dataset.
    Train(ConfigArgs),
    /// Sample images from a trained checkpoint.
    Sample(ConfigArgs),
    /// Writer-interpolation grid from a trained checkpoint.
    Interpolate(ConfigArgs),
    /// Metrics report: correctness score, distribution metrics, zero-shot
    /// recognition accuracy.
    Eval(ConfigArgs),
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenDataset(a) => {
            let cfg: config::GenDatasetConfig = load_config(&a.config, &a.overrides)?;
            commands::cmd_gen_dataset(&cfg)
        }
        Command::Train(a) => {
            let cfg: config::TrainConfig = load_config(&a.config, &a.overrides)?;
            commands::cmd_train(&cfg)
        }
        Command::Sample(a) => {
            let cfg: config::SampleConfig = load_config(&a.config, &a.overrides)?;
            commands::cmd_sample(&cfg)
        }
        Command::Interpolate(a) => {
            let cfg: config::InterpolateConfig = load_config(&a.config, &a.overrides)?;
            commands::cmd_interpolate(&cfg)
        }
        Command::Eval(a) => {
            let cfg: config::EvalConfig = load_config(&a.config, &a.overrides)?;
            commands::cmd_eval(&cfg).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
