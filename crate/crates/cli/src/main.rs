use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use faultline::planner::SelectMode;

mod commands;
mod run;

#[derive(Debug, Parser)]
#[command(name = "faultline", version, about = "Log-driven fault localization and recovery planning")]
struct Cli {
    /// TOML run configuration; documented defaults fill missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse logs and write events, parse statistics and template embeddings.
    Parse {
        /// Log files; `data.corpus` when omitted.
        inputs: Vec<PathBuf>,
        /// Header format name.
        #[arg(long)]
        format: Option<String>,
        /// Comma-separated window scales.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<usize>>,
        /// Reuse a codebook instead of fitting one.
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Train on the labeled corpus and write checkpoints and history.
    Fit {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<usize>>,
    },
    /// Score root causes for fixed-length slices of a log.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `codebook.lidc` next to the checkpoint.
        #[arg(long)]
        codebook: Option<PathBuf>,
        inputs: Vec<PathBuf>,
    },
    /// Replay recovery episodes against the uniform-random baseline.
    Simulate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of paired seeds; `bench.seeds` when omitted.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: Mode,
    },
    /// Measure throughput, recovery steps and localization accuracy.
    Bench {
        /// Reasoner dimensions, e.g. `d=16,32,64`.
        #[arg(long)]
        sweep: Option<String>,
        /// Run the analysis pipeline on all cores.
        #[arg(long)]
        parallel: bool,
    },
    /// Write a synthetic labeled corpus.
    GenCorpus {
        /// Approximate record count; `corpus.sequences` decides when omitted.
        #[arg(long)]
        records: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Greedy,
    Sample,
}

impl From<Mode> for SelectMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Greedy => SelectMode::Greedy,
            Mode::Sample => SelectMode::Sample,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
