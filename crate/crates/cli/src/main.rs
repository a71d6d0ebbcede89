//! `ptv`: batch driver for the point-tube video pipeline.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime and data errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ptv", version, about = "Point-tube video action recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Seed override (beats the PTV_SEED environment variable and the
    /// config file).
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads for generation and sweep/ablation cells.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write checkpoint, metrics log and eval report.
    Train {
        #[command(flatten)]
        common: Common,

        /// Resume from an existing checkpoint.
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,

        /// Frames per clip override (T).
        #[arg(long)]
        frames: Option<usize>,

        /// Points per frame override (N).
        #[arg(long)]
        points: Option<usize>,
    },
    /// Evaluate a (possibly untrained) model on the test split.
    Eval {
        #[command(flatten)]
        common: Common,

        /// Checkpoint to restore before evaluating.
        #[arg(long)]
        checkpoint: Option<PathBuf>,

        /// Also export pooled pre-head embeddings for the split.
        #[arg(long)]
        embeddings: bool,
    },
    /// Train and evaluate every component-toggle combination.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Radius sensitivity sweep with and without trainable metric scales.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Print clip file headers and per-frame point counts.
    Inspect {
        /// Clip files to describe.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let result = match cli.command {
        Command::Generate { common } => commands::generate(common),
        Command::Train { common, from_checkpoint, frames, points } => {
            commands::train(common, from_checkpoint, frames, points)
        }
        Command::Eval { common, checkpoint, embeddings } => {
            commands::eval(common, checkpoint, embeddings)
        }
        Command::Ablate { common } => commands::ablate(common),
        Command::Sweep { common } => commands::sweep(common),
        Command::Inspect { files } => commands::inspect(files),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<ptv_core::Error>().is_some_and(|err| {
                matches!(err, ptv_core::Error::Config(_))
            });
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}
