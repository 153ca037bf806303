//! `sda`: command-line driver for the alignment and recommendation pipeline.

mod commands;
mod exit;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "sda", version, about = "Align a frozen dual-tower encoder and train recommenders on its embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; omitted keys keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed; overrides the per-stage seeds of the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory (the dataset directory for `generate`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Write a synthetic catalog and interaction log.
    Generate,
    /// Stage 1: train adapters against the alignment loss.
    Adapt,
    /// Precompute text and image embedding tables with the trained adapters.
    Embed,
    /// Stage 2: train the recommender on the embedding tables.
    TrainRec,
    /// Evaluate the trained recommender (leave-one-out, full ranking).
    Eval,
    /// Modality gradient-conflict probe for LoRA and MoDA adapters.
    Diagnose,
    /// Run the five ablation variants end to end.
    Ablate,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = settings::Settings::load(cli.config.as_deref(), cli.seed, cli.out.as_deref(), cli.force, cli.command == Command::Generate)
        .and_then(|s| match cli.command {
            Command::Generate => commands::generate(&s),
            Command::Adapt => commands::adapt(&s),
            Command::Embed => commands::embed(&s),
            Command::TrainRec => commands::train_rec(&s),
            Command::Eval => commands::eval(&s),
            Command::Diagnose => commands::diagnose(&s),
            Command::Ablate => commands::ablate(&s),
        });
    match result {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit::code_for(&err) as u8)
        }
    }
}
