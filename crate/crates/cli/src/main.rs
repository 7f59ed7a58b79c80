//! `disentangle`: synthetic data generation, identity pretraining, training,
//! evaluation and synthesis, driven by one TOML run config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use disentangle::model::Mode;

use crate::commands::Failure;
use crate::config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "disentangle", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run config; defaults apply to anything it leaves out.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for data generation, pretraining, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// ipd, id-only or baseline.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Continue training from an epoch checkpoint.
    #[arg(long, global = true, value_name = "PATH")]
    resume: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    Generate,
    /// Pretrain and freeze the identity encoder.
    PretrainId,
    /// Train a model in the selected mode.
    Train,
    /// Accuracy tables, orthogonality and neutral-synthesis score.
    Eval,
    /// Write decoded feature panels for a few samples.
    Synthesize,
    /// Write expression embeddings of every sample.
    ExportEmbeddings,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let overrides = Overrides { seed: cli.seed, mode: cli.mode, out: cli.out, set: cli.set };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides).map_err(|e| Failure::Usage(e.to_string()))?;
    if cli.resume.is_some() && !matches!(cli.command, Command::Train) {
        return Err(Failure::Usage("--resume only applies to `train`".into()));
    }
    match cli.command {
        Command::Generate => commands::generate(&cfg),
        Command::PretrainId => commands::pretrain_id(&cfg),
        Command::Train => commands::train(&cfg, cli.resume.as_deref()),
        Command::Eval => commands::eval(&cfg),
        Command::Synthesize => commands::synthesize(&cfg),
        Command::ExportEmbeddings => commands::export_embeddings(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
