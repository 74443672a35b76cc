//! `tinyvid` — pipeline driver for the toy text-to-video personalization
//! stack: synthesize a corpus, pretrain the base model, fit reward models,
//! fit identity adapters (reward-driven or reconstruction baseline), sweep
//! ablation grids, evaluate runs, and export media.
//!
//! Exit codes: 0 success, 2 usage or invalid configuration, 3 missing
//! prerequisite artifact, 4 runtime failure.

mod config;
mod media;
mod pipeline;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tinyvid_core::Error;

#[derive(Parser)]
#[command(name = "tinyvid", version, about = "Toy reward-driven video personalization pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a deterministic scene corpus and write it to a directory.
    GenCorpus(GenCorpusArgs),
    /// Pretrain the base denoiser and autoencoder on a corpus.
    Pretrain(PretrainArgs),
    /// Fit the identity embedders and the semantic scorer on a corpus.
    FitRewards(FitRewardsArgs),
    /// Fit a reward-driven identity adapter for one held-out identity.
    Personalize(FitArgs),
    /// Fit the reconstruction-only baseline adapter for one held-out identity.
    Baseline(FitArgs),
    /// Train and evaluate one adapter per ablation cell.
    Ablate(AblateArgs),
    /// Score finished runs against a corpus and print a metric table.
    Evaluate(EvaluateArgs),
    /// Render a run's generated clips as media files.
    Export(ExportArgs),
}

#[derive(clap::Args)]
struct GenCorpusArgs {
    /// Directory to create (manifest plus per-video frame files).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Optional JSON config file; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Total number of identities, held-out ones included.
    #[arg(long)]
    identities: Option<usize>,
    /// Clips rendered per identity.
    #[arg(long)]
    videos_per_identity: Option<usize>,
    /// How many identities to reserve for personalization.
    #[arg(long)]
    heldout: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct PretrainArgs {
    /// Corpus directory produced by gen-corpus.
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Run directory to create.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Optional JSON config file; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Denoising steps of the sampling schedule the model is trained for.
    #[arg(long)]
    sampler_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct FitRewardsArgs {
    /// Corpus directory produced by gen-corpus.
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Run directory to create.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

/// Shared surface of `personalize` and `baseline`.
#[derive(clap::Args)]
struct FitArgs {
    /// Pretrained denoiser file (from a pretrain run).
    #[arg(long, value_name = "FILE")]
    denoiser: PathBuf,
    /// Fitted reward models file; unused by `baseline`.
    #[arg(long, value_name = "FILE")]
    rewards: Option<PathBuf>,
    /// Corpus directory the held-out identity comes from.
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Index into the corpus's held-out identity list (default 0).
    #[arg(long)]
    identity: Option<usize>,
    /// Run directory to create (or to resume).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Optional JSON config file; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    /// Final fraction of sampling steps that keep adapter gradients.
    #[arg(long)]
    gate_fraction: Option<f64>,
    #[arg(long)]
    icr_weight: Option<f64>,
    #[arg(long)]
    scr_weight: Option<f64>,
    /// Frames scored by the semantic reward each step.
    #[arg(long)]
    m_frames: Option<usize>,
    /// Reference images rendered for the identity.
    #[arg(long)]
    k_references: Option<usize>,
    #[arg(long)]
    sampler_steps: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Save a checkpoint every N steps (0 = only at the end).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Training prompt pool size; ignored by `baseline`.
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    pool_seed: Option<u64>,
    #[arg(long)]
    references_seed: Option<u64>,
    /// Clips generated with the fitted adapter for later evaluation.
    #[arg(long)]
    eval_clips: Option<usize>,
    #[arg(long)]
    eval_seed: Option<u64>,
}

#[derive(clap::Args)]
struct AblateArgs {
    #[arg(long, value_name = "FILE")]
    denoiser: PathBuf,
    #[arg(long, value_name = "FILE")]
    rewards: PathBuf,
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    identity: usize,
    /// Run directory to create.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Optional JSON config file; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Comma-separated cell labels; defaults to the full standard grid.
    #[arg(long, value_delimiter = ',')]
    cells: Option<Vec<String>>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    /// Comma-separated run directories (personalize or baseline output).
    #[arg(long, value_delimiter = ',', required = true)]
    runs: Vec<PathBuf>,
    /// Fitted reward models file (provides both eval models).
    #[arg(long, value_name = "FILE")]
    rewards: PathBuf,
    /// Corpus directory supplying the real-clip reference statistics.
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Optional directory for report.csv and report.json.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MediaFormat {
    /// One animated gif per clip.
    Gif,
    /// One still image per clip, frames tiled left to right.
    PngGrid,
}

#[derive(clap::Args)]
struct ExportArgs {
    /// Run directory holding generated clips.
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
    #[arg(long, value_enum)]
    format: MediaFormat,
    /// Output directory for the media files.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::MissingArtifact(_) => 3,
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(args) => pipeline::gen_corpus(&args),
        Command::Pretrain(args) => pipeline::pretrain(&args),
        Command::FitRewards(args) => pipeline::fit_rewards(&args),
        Command::Personalize(args) => pipeline::personalize(&args),
        Command::Baseline(args) => pipeline::baseline(&args),
        Command::Ablate(args) => pipeline::ablate(&args),
        Command::Evaluate(args) => pipeline::evaluate(&args),
        Command::Export(args) => pipeline::export(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
