//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bnn", version, about = "Train and evaluate Bayesian neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Regression (builtin `toy` data or a CSV file).
    Regress(CommonArgs),
    /// Classification (builtin `blobs`/`moons` data or a CSV file).
    Classify(CommonArgs),
    /// Continual learning over a sequence of split tasks.
    Vcl(VclArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// ml, map, mean-field or hmc.
    #[arg(long, default_value = "mean-field")]
    pub inference: String,
    /// plain, local-reparam or flipout (variational inference only).
    #[arg(long)]
    pub context: Option<String>,
    /// Architecture file, one layer per line: `dense IN OUT [bias]`, `tanh`, `relu`, `identity`.
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// iid:sd=S, iid:laplace=B, layerwise:method=radford|xavier|kaiming, dict:@FILE.json
    #[arg(long, default_value = "iid:sd=1")]
    pub prior: String,
    /// categorical, bernoulli, gaussian:sd=S or heteroskedastic.
    #[arg(long)]
    pub likelihood: Option<String>,
    #[arg(long)]
    pub init_sd: Option<f64>,
    #[arg(long)]
    pub max_sd: Option<f64>,
    /// Keep guide means at their initial values.
    #[arg(long)]
    pub fix_mean: bool,
    /// layer-scaled or sample-prior.
    #[arg(long)]
    pub mean_init: Option<String>,
    /// Site name, layer prefix (`layer2`) or role (`weight`, `bias`) to keep deterministic.
    #[arg(long)]
    pub hide: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Defaults to the full dataset.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Posterior samples used for prediction.
    #[arg(long, default_value_t = 100)]
    pub num_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Builtin dataset name or CSV path.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long, default_value = "y")]
    pub target_column: String,
    #[arg(long, default_value = "out")]
    pub output: PathBuf,
    /// Checkpoint to continue training from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub leapfrog_steps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub hmc_samples: Option<usize>,
    /// hmc or nuts (nuts is rejected).
    #[arg(long)]
    pub kernel: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct VclArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 5)]
    pub tasks: usize,
    /// gaussian_blobs or two_moons_rotations.
    #[arg(long, default_value = "gaussian_blobs")]
    pub split: String,
    /// Training (and test) examples per task.
    #[arg(long, default_value_t = 200)]
    pub task_size: usize,
}
