use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "adoc", version, about = "Adapter-augmented text-line recognizer: data generation, training, adaptation and evaluation")]
pub struct Cli {
    /// Plain `key = value` file of model and training settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Print machine-readable JSON instead of text tables.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic multi-domain dataset.
    GenData(GenDataArgs),
    /// Train the shared backbone (with domain 0's norms and head).
    TrainBackbone(TrainArgs),
    /// Train one domain's adapters, norms and head with everything else frozen.
    TrainAdapter(TrainArgs),
    /// Train the backbone and one domain's bank together.
    Finetune(TrainArgs),
    /// Score a checkpoint on one or all domains.
    Eval(EvalArgs),
    /// Show trainable-parameter counts per mode.
    CountParams(CountArgs),
    /// Transcribe the images in a sample file.
    Decode(DecodeArgs),
    /// Run a full experiment (exp1 or exp2) end to end.
    Protocol(ProtocolArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Training samples per domain (default 2000).
    #[arg(long)]
    pub train_count: Option<usize>,
    /// Test samples per domain (default 400).
    #[arg(long)]
    pub test_count: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to read (adapter/finetune) or create (backbone).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Where to write the trained checkpoint (defaults to --checkpoint).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset domain (index or name) to adapt to; backbone training
    /// accepts a comma-separated list and defaults to domain 0.
    #[arg(long)]
    pub domain: Option<String>,
    /// Continue an interrupted run from the checkpoint's training state.
    #[arg(long)]
    pub resume: bool,
    /// Run log path (defaults to the output checkpoint with `.runlog.jsonl`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset domain (index or name).
    #[arg(long, conflicts_with = "all_domains", required_unless_present = "all_domains")]
    pub domain: Option<String>,
    /// One row per registered domain.
    #[arg(long)]
    pub all_domains: bool,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Count a checkpoint's parameters; without it a fresh model is built
    /// from the config.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sample file (`*.bin`) to transcribe.
    #[arg(long)]
    pub samples: PathBuf,
    /// Registered domain (id or name) whose bank to use.
    #[arg(long, default_value = "0")]
    pub domain: String,
    /// Only decode the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ProtocolArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// exp1 (backbone on domain 0) or exp2 (backbone on all domains).
    #[arg(long, default_value = "exp1")]
    pub scenario: String,
    #[command(flatten)]
    pub overrides: Overrides,
}
