//! `linmir`: tokenize, pretrain, probe, census and bench from one binary.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use linmir_bench::alloc::TrackingAllocator;
use linmir_core::encoder::{BlockKind, GlobalBranchKind};

// lets `bench` report memory high-water marks
#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Debug, Parser)]
#[command(name = "linmir", version, about = "Masked-token audio pretraining with linear-time SummaryMixing encoders")]
pub struct Cli {
    /// TOML (or JSON snapshot) config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Global seed keying all randomness.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (overrides LINMIR_OUT_DIR and the config file).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute teacher tokens for clips.
    Tokenize(TokenizeArgs),
    /// Masked-prediction pretraining.
    Pretrain(PretrainArgs),
    /// Train a probe on frozen embeddings of a synthetic task.
    Probe(ProbeArgs),
    /// Print the parameter census of an encoder configuration.
    Census(CensusArgs),
    /// Scaling or size benchmarks.
    Bench(BenchArgs),
    /// Write pooled clip embeddings as an f32 matrix.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    /// WAV file, manifest (one path per line) or directory.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Tokenize this many synthetic clips instead.
    #[arg(long, conflicts_with = "input")]
    pub synthetic: Option<usize>,
    /// Reuse a checkpoint's normalizer and quantizer.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub codebook_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Train on this many synthetic clips.
    #[arg(long, conflicts_with = "manifest")]
    pub synthetic: Option<usize>,
    /// WAV manifest or directory.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Encoder size: desk, small or large.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub block: Option<BlockKind>,
    #[arg(long)]
    pub branch: Option<GlobalBranchKind>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub final_lr: Option<f64>,
    #[arg(long)]
    pub mask_prob: Option<f64>,
    /// Steps between checkpoints (0 disables periodic checkpoints).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// pitch_class, tone_count or am_rate_regression.
    #[arg(long)]
    pub task: Option<String>,
    /// Number of clips in the synthetic task.
    #[arg(long)]
    pub size: Option<usize>,
    /// mean or max.
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Also report a shuffled-label control run.
    #[arg(long)]
    pub control: bool,
}

#[derive(Debug, Args)]
pub struct CensusArgs {
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub block: Option<BlockKind>,
    #[arg(long)]
    pub branch: Option<GlobalBranchKind>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// table or json.
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// scaling or size.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub block: Option<BlockKind>,
    /// attention, summary_mixing or both.
    #[arg(long)]
    pub branch: Option<String>,
    /// global_branch or block.
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Comma-separated ascending sequence lengths.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// csv, json or markdown.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    /// WAV file, manifest or directory to embed instead of a synthetic task.
    #[arg(long, conflicts_with = "task")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();

    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("linmir: error[{}]: {msg}", commands::error_kind(&e));
            ExitCode::from(1)
        }
    }
}
