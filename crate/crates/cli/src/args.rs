use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::GenMode;

#[derive(Debug, Parser)]
#[command(
    name = "glassvae",
    version,
    about = "Train and sample a graph VAE over periodic atomic configurations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Parse dump files and energies into a split dataset.
    Prepare(PrepareArgs),
    /// Train a model on the training split.
    Train(TrainArgs),
    /// Metrics, parity data and RDF curves for a trained model.
    Eval(EvalArgs),
    /// Random or energy-targeted structures from the latent space.
    Generate(GenerateArgs),
    /// Invariance properties and gradient checks.
    CheckInvariance(CheckArgs),
    /// Replay a run from its manifest.
    Rerun(RerunArgs),
}

/// Flags shared by every command; each overrides the matching config key.
#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub cutoff: Option<f64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Lower target energy in eV/atom.
    #[arg(long, allow_hyphen_values = true)]
    pub e_min: Option<f64>,
    /// Upper target energy in eV/atom.
    #[arg(long, allow_hyphen_values = true)]
    pub e_max: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<GenMode>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct PrepareArgs {
    /// `TEMPERATURE:PATH`, repeatable.
    #[arg(long = "dump", value_name = "TEMP:PATH")]
    pub dumps: Vec<String>,
    /// CSV of `frame_id,energy_eV`.
    #[arg(long)]
    pub energies: Option<PathBuf>,
    /// `type=label` lines.
    #[arg(long)]
    pub species_map: Option<PathBuf>,
    /// Instead of dumps, generate this many harmonic B2 crystal frames.
    #[arg(long, conflicts_with_all = ["dumps", "energies"])]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub max_per_temperature: Option<usize>,
    #[command(flatten)]
    pub common: Overrides,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset JSONL written by `prepare`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Continue from this checkpoint; `--epochs` is the total to reach.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// `TERM:EPOCH`; replaces one loss term with NaN.
    #[arg(long, hide = true)]
    pub inject_nan: Option<String>,
    #[command(flatten)]
    pub common: Overrides,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Train,
    #[default]
    Test,
    All,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    pub split: SplitChoice,
    #[command(flatten)]
    pub common: Overrides,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset holding the anchor frames.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Frame id of an anchor configuration, repeatable.
    #[arg(long = "anchor", required = true)]
    pub anchors: Vec<u64>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Sample `z ~ N(0, I)` instead of perturbing the anchor's posterior.
    #[arg(long)]
    pub prior: bool,
    #[command(flatten)]
    pub common: Overrides,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct CheckArgs {
    /// Use frames of this dataset instead of random fixtures.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Check this model's encoder instead of a freshly initialized one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub configs: Option<usize>,
    #[arg(long)]
    pub no_gradients: bool,
    #[command(flatten)]
    pub common: Overrides,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    pub manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    pub fn overrides(&self) -> Option<&Overrides> {
        match self {
            Command::Prepare(a) => Some(&a.common),
            Command::Train(a) => Some(&a.common),
            Command::Eval(a) => Some(&a.common),
            Command::Generate(a) => Some(&a.common),
            Command::CheckInvariance(a) => Some(&a.common),
            Command::Rerun(_) => None,
        }
    }
}
