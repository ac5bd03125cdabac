//! `lab`: pretrain, tune, evaluate and compare plain and retrieval-enhanced
//! decoders on the synthetic retrieval QA task.

mod commands;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use retrolab::harness::{ArchKind, TuneMethod};
use retrolab::model::SizePreset;

#[derive(Parser, Debug)]
#[command(name = "lab", version, about = "Plain vs retrieval-enhanced decoders with parameter-efficient tuning")]
pub struct Cli {
    /// TOML suite config; built-in defaults when absent.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, env = "LAB_SEED", global = true)]
    pub seed: Option<u64>,
    /// Directory for checkpoints, records, tables and plot data.
    #[arg(long, default_value = "runs", global = true)]
    pub out: PathBuf,
    /// Disable data-parallel execution.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CellArgs {
    #[arg(long)]
    pub arch: Option<ArchKind>,
    #[arg(long)]
    pub size: Option<SizePreset>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain a base model and save it with its optimizer state.
    Pretrain {
        #[command(flatten)]
        cell: CellArgs,
    },
    /// Tune a pretrained base with one method and append its record.
    Tune {
        #[command(flatten)]
        cell: CellArgs,
        #[arg(long)]
        method: TuneMethod,
        /// Base checkpoint; defaults to the one `pretrain` writes.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Token F1 of a base or tuned model on validation and test questions.
    Eval {
        #[command(flatten)]
        cell: CellArgs,
        #[arg(long)]
        base: Option<PathBuf>,
        /// PEFT or full checkpoint written by `tune`.
        #[arg(long)]
        tuned: Option<PathBuf>,
        /// Predictions to print.
        #[arg(long, default_value_t = 3)]
        show: usize,
    },
    /// Run the whole grid and write records, tables and plot data.
    Grid,
    /// Render tables from a records file, plus the bundled published data.
    Report {
        /// Defaults to `<out>/results.jsonl`.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, default_value = "test_f1")]
        metric: String,
    },
    /// Build or query a retrieval index.
    #[command(subcommand)]
    Index(IndexCommand),
}

#[derive(Subcommand, Debug)]
pub enum IndexCommand {
    /// Chunk and embed a corpus (JSONL of `{id, title, text}`, or the
    /// synthetic corpus when omitted).
    Build {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 256)]
        dim: usize,
    },
    /// Top-k chunks for a query.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        text: String,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    commands::run(&cli)
}
