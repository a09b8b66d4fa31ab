//! Command-line driver: dataset generation, training, profiling, explanation
//! and evaluation.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use config::{FileConfig, Resolved, CONFIG_SNAPSHOT, REPORT};

#[derive(Parser, Debug)]
#[command(name = "rvl", version, about = "Train, explain and evaluate rationale-grounded image-text encoders")]
pub struct Cli {
    /// Seed for all randomness [default: 0, or the config file's `seed`]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config with optional `seed`, `encoder`, `trainer` and `data` sections
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; computation currently runs on one
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Generate the synthetic part benchmark
    GenData(GenDataArgs),
    /// Validate every rationale tree file in a directory
    ValidateOntology(ValidateArgs),
    /// Train a model on a generated dataset
    Train(TrainArgs),
    /// Mean-ablate layers to measure their importance and derive layer weights
    Profile(ProfileArgs),
    /// Heatmap and mask of one rationale on one image
    Explain(ExplainArgs),
    /// Localization mIoU of part heatmaps against ground-truth masks
    EvalSeg(EvalArgs),
    /// Disentanglability of part heatmaps
    EvalDisen(EvalArgs),
    /// Zero-shot classification accuracy with category prompts
    EvalZeroshot(EvalArgs),
    /// Linear probe on frozen image embeddings
    EvalProbe(EvalArgs),
    /// Image-caption retrieval recall
    EvalRetrieval(RetrievalArgs),
    /// Classification by mean similarity to per-category rationale sets
    EvalRationalePred(RationalePredArgs),
    /// Top-k images for a rationale
    Retrieve(RetrieveArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for rvl::bench::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => rvl::bench::Split::Train,
            SplitArg::Val => rvl::bench::Split::Val,
            SplitArg::Test => rvl::bench::Split::Test,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionArg {
    Plain,
    Rationale,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GenDataArgs {
    /// Scenes per category [default: 512, or the config file's `data.n_per_class`]
    #[arg(long)]
    pub n_per_class: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ValidateArgs {
    /// Directory of tree JSON files
    pub dir: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Start from this checkpoint instead of a fresh initialization
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Profile directory whose layer weights replace the uniform ones
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Training epochs [default: 8]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Disentanglement multiplier [default: 0.5]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Reconstruction multiplier [default: 0.5]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Disentanglement margin [default: 0.5]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Reconstruction margin [default: 0.5]
    #[arg(long)]
    pub delta: Option<f64>,
    /// Contrastive temperature [default: 0.07]
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Peak learning rate [default: 3e-4]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Batch size [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training captions [default: rationale]
    #[arg(long, value_enum)]
    pub caption_mode: Option<CaptionArg>,
    /// Fixed heatmap threshold instead of mean plus one standard deviation
    #[arg(long)]
    pub tau: Option<f64>,
    /// Drop the disentanglement penalty (lambda = 0)
    #[arg(long)]
    pub ablate_disen: bool,
    /// Drop the reconstruction penalty (gamma = 0)
    #[arg(long)]
    pub ablate_recon: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ProfileArgs {
    /// Dataset directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split whose accuracy is ablated; means always come from the train split
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Use uniform weights when every layer delta is zero
    #[arg(long)]
    pub fallback_uniform: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ExplainArgs {
    /// Checkpoint directory
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image in binary PPM format
    #[arg(long)]
    pub image: PathBuf,
    /// Rationale text
    #[arg(long)]
    pub rationale: String,
    /// Profile directory providing layer weights [default: uniform]
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Fixed threshold instead of mean plus one standard deviation
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvalArgs {
    /// Dataset directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluated split
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Profile directory providing layer weights for heatmaps [default: uniform]
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Fixed heatmap threshold instead of mean plus one standard deviation
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct RetrievalArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Recall cutoffs
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub k: Vec<usize>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct RationalePredArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// JSON object mapping each category to its rationale texts [default: the dataset's part phrases]
    #[arg(long)]
    pub rationale_file: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct RetrieveArgs {
    /// Dataset directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Rationale text to search for
    #[arg(long)]
    pub rationale: String,
    /// Number of images returned
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Searched split
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

/// Exit status for a failed run: 1 for bad input or data, 2 for internal faults.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<rvl::Error>() {
            return match e {
                rvl::Error::Tensor(_) | rvl::Error::Numeric(_) | rvl::Error::Generation(_) => 2,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 1;
        }
    }
    2
}

/// Parse `args` (program name first), run the command and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
