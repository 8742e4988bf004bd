use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use seqnas_core::SamplingMode;

#[derive(Debug, Parser)]
#[command(name = "seqnas", version, about = "Predictor-guided architecture search for event-sequence classifiers")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every random choice; overrides `search.seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run configuration (`preset` or `space`, `search`, `predictor`, `evaluator`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run state directory.
    #[arg(long, global = true, env = "SEQNAS_STATE_DIR")]
    pub state_dir: Option<PathBuf>,
    /// Write the command's output here instead of standard output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Validate and print the plan without evaluating or writing state.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw architectures from the search space (one JSON object per line).
    Sample {
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<SamplingMode>,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Encode specs (JSON per line, file or `-`) into feature-vector strings.
    Encode {
        #[arg(default_value = "-")]
        input: String,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Decode feature-vector strings (arguments, or lines of stdin) into specs.
    Decode {
        vectors: Vec<String>,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Print the number of architectures in the space.
    Cardinality {
        #[arg(long)]
        preset: Option<String>,
    },
    /// Check the configuration and, optionally, a file of specs.
    Validate {
        specs: Option<String>,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Run the predictor-guided search.
    Search,
    /// Evaluate a budget of distinct random architectures.
    RandomSearch {
        #[arg(long)]
        budget: usize,
        /// Distil from the best models once `kd_start_after` are trained.
        #[arg(long)]
        kd: bool,
    },
    /// Continue the run stored in the state directory.
    Resume,
    /// Figure-style series from a state directory, as CSV.
    Report {
        #[arg(long, value_enum, default_value_t = Curve::Top3)]
        curve: Curve,
        /// Window size of the running top-k mean.
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Bench dataset files.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Synthetic bench dataset generation.
    #[command(subcommand)]
    Synthbench(SynthCommand),
    /// Protocol stub answering every train request with a fixed score.
    #[command(hide = true)]
    StubTrainer {
        #[arg(long, default_value_t = 0.5)]
        score: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Curve {
    /// Running mean of the k best scores.
    Top3,
    /// Running best score.
    Best,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImportFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Convert a CSV or headerless JSONL table into the canonical format.
    Import {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = ImportFormat::Csv)]
        format: ImportFormat,
    },
    /// Write a canonical bench file as CSV or headerless JSONL.
    Export {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = ImportFormat::Csv)]
        format: ImportFormat,
    },
    /// Score histogram as CSV `lower_edge,count`.
    Histogram {
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        method: Option<String>,
    },
    /// Feature matrix and targets as CSV (`f0..fN,score`).
    ToSurrogate {
        input: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        method: Option<String>,
    },
    /// Record counts per dataset and method, as CSV.
    Counts { input: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Generate a bench file from the synthetic backend.
    Make {
        /// JSON plan (cells, noise, search sizes); defaults to the 3200-record layout.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        noise_std: Option<f64>,
    },
}

fn parse_mode(s: &str) -> Result<SamplingMode, String> {
    s.parse()
}
