//! `mia`: mindscape-augmented retrieval pipeline driver.
//!
//! Nine subcommands chain the pipeline end to end over one TOML config:
//! ingest -> mindscape -> index -> annotate -> train-adapter ->
//! retrieve/answer -> eval -> analyze. Every stage writes a manifest of
//! content digests so outputs are reproducible and traceable.

mod config;
mod error;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mia_core::embedding::EvidenceKind;

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "mia", version, about = "Mindscape-augmented retrieval pipeline")]
struct Cli {
    /// Pipeline config file; artifact paths resolve relative to it.
    #[arg(long, global = true, default_value = "mia.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk the raw corpus into token windows.
    Ingest,
    /// Summarize chunks and reduce them to one global summary per document.
    Mindscape,
    /// Embed chunks (and optionally entity nodes) into vector indexes.
    Index,
    /// Derive silver evidence, negatives, and gold rows for each question.
    Annotate {
        /// Evidence population: "chunk" or "node".
        #[arg(long, default_value = "chunk")]
        kind: String,
        /// Also export the generator fine-tuning corpus.
        #[arg(long)]
        sft: bool,
    },
    /// Fit the linear retrieval adapter on the silver annotations.
    TrainAdapter {
        /// Override the configured number of optimization steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run conditioned retrieval for every question.
    Retrieve {
        /// Evidence population: "chunk" or "node".
        #[arg(long, default_value = "chunk")]
        kind: String,
        /// Number of hits per query (default: largest configured cutoff).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Generate an answer for every question.
    Answer {
        /// Number of retrieved chunks per prompt.
        #[arg(long)]
        k: Option<usize>,
        /// Prompt with the global summary only, retrieving nothing.
        #[arg(long)]
        summary_only: bool,
    },
    /// Score predictions against the gold rows.
    Eval {
        /// Comma-separated recall cutoffs, e.g. "3,5,10".
        #[arg(long)]
        k: Option<String>,
    },
    /// Compute query/chunk-subspace angles, plus per-layer evidence
    /// alignment when an attention dump is provided.
    Analyze {
        /// Attention dump file to score.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Comma-separated relevant chunk span names within the dump.
        #[arg(long)]
        relevant: Option<String>,
    },
}

fn parse_kind(kind: &str) -> Result<EvidenceKind, CliError> {
    match kind {
        "chunk" => Ok(EvidenceKind::Chunk),
        "node" => Ok(EvidenceKind::Node),
        other => Err(CliError::Config(vec![format!(
            "kind {other:?} is not \"chunk\" or \"node\""
        )])),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (cfg, digest) = config::load_config(&cli.config)?;
    match cli.command {
        Command::Ingest => stages::ingest(&cfg, &digest),
        Command::Mindscape => stages::mindscape(&cfg, &digest),
        Command::Index => stages::index(&cfg, &digest),
        Command::Annotate { kind, sft } => {
            stages::annotate(&cfg, &digest, parse_kind(&kind)?, sft)
        }
        Command::TrainAdapter { steps } => stages::train_adapter(&cfg, &digest, steps),
        Command::Retrieve { kind, k } => stages::retrieve(&cfg, &digest, parse_kind(&kind)?, k),
        Command::Answer { k, summary_only } => stages::answer(&cfg, &digest, k, summary_only),
        Command::Eval { k } => stages::eval(&cfg, &digest, k),
        Command::Analyze { dump, relevant } => {
            stages::analyze(&cfg, &digest, dump.as_deref(), relevant.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
