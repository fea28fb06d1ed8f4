//! `pfcpgan`: generate data, train, evaluate, ablate and reconstruct.
//!
//! Exit codes: 0 success, 2 configuration, 3 I/O, 4 numeric, 5 protocol.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pfcpgan_core::AblationPreset;

#[derive(Parser, Debug)]
#[command(name = "pfcpgan", version, about = "Coupled profile/frontal embedding experiments")]
struct Cli {
    /// Override every seed in the config (data, model, batches, folds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Arithmetic width; checkpoint-reading commands default to the
    /// checkpoint's own precision.
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run config (TOML); every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `$PFCPGAN_RUN_ROOT/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Also render PNG plots next to the CSVs.
    #[arg(long)]
    plot: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset in the on-disk layout.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; the config's synthetic dataset when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Ablation preset overriding `train.ablation_preset`.
        #[arg(long)]
        preset: Option<AblationPreset>,
        /// Overrides `train.max_steps`.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (`.../checkpoints/step_NNNNNN`).
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory; the config's synthetic dataset when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Verification folds, closed-set identification, or yaw-binned rank-1.
        #[arg(long, value_enum, default_value_t = Protocol::Folds)]
        protocol: Protocol,
    },
    /// Train and evaluate every ablation preset on one held-out fold.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; the config's synthetic dataset when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `train.max_steps`.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Cross-domain reconstruction panels.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (`.../checkpoints/step_NNNNNN`).
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory; the config's synthetic dataset when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        direction: Direction,
        /// Number of inputs shown in the panel.
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Decode from the bottleneck alone.
        #[arg(long)]
        zero_skips: bool,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Folds,
    Identify,
    Yaw,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Profile input, frontal decoder.
    P2f,
    /// Frontal input, profile decoder.
    F2p,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let globals = commands::Globals {
        seed: cli.seed,
        precision: cli.precision.as_deref().map(|p| if p == "64" { 64 } else { 32 }),
    };
    let result = match cli.command {
        Command::Generate { common } => commands::generate(&globals, &common),
        Command::Train {
            common,
            data,
            resume,
            preset,
            max_steps,
        } => commands::train(&globals, &common, data.as_deref(), resume.as_deref(), preset, max_steps),
        Command::Eval {
            common,
            ckpt,
            data,
            protocol,
        } => commands::eval(&globals, &common, &ckpt, data.as_deref(), protocol),
        Command::Ablate {
            common,
            data,
            max_steps,
        } => commands::ablate(&globals, &common, data.as_deref(), max_steps),
        Command::Reconstruct {
            common,
            ckpt,
            data,
            direction,
            count,
            zero_skips,
        } => commands::reconstruct(&globals, &common, &ckpt, data.as_deref(), direction, count, zero_skips),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
