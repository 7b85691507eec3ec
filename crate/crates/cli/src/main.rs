use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use asl::{execute, Stage};

/// Anomaly-aware segmentation pipeline runner.
#[derive(Parser)]
#[command(name = "asl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct StageArgs {
    /// Path to the run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Run directory for artifacts.
    #[arg(long)]
    run: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData(StageArgs),
    /// Pre-train the classifier on known classes.
    Train(StageArgs),
    /// Build the synthetic-unknown auxiliary set by masked gradient update.
    Mgu(StageArgs),
    /// Fine-tune with the combined known/unknown objective.
    Finetune(StageArgs),
    /// Compute anomaly metrics and export heatmaps.
    Eval(StageArgs),
    /// Sweep the rejection threshold.
    Sweep(StageArgs),
    /// Run the known-unknown selection-bias pilot.
    Pilot(StageArgs),
    /// Audit reverse-mode gradients against finite differences.
    Gradcheck(StageArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, args) = match &cli.command {
        Command::GenData(a) => (Stage::GenData, a),
        Command::Train(a) => (Stage::Train, a),
        Command::Mgu(a) => (Stage::Mgu, a),
        Command::Finetune(a) => (Stage::Finetune, a),
        Command::Eval(a) => (Stage::Eval, a),
        Command::Sweep(a) => (Stage::Sweep, a),
        Command::Pilot(a) => (Stage::Pilot, a),
        Command::Gradcheck(a) => (Stage::Gradcheck, a),
    };
    match execute(stage, &args.config, &args.run, args.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("asl {}: {}", stage.name(), e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
