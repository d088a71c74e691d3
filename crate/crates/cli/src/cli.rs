use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "physprior", version, about = "Physical-prior segmentation refinement pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON run configuration; command-line flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate or extract a knowledge graph.
    #[command(subcommand)]
    Pckg(PckgCommand),
    /// Synthesize rasters from a label mask, or write the demo benchmark.
    Synth(SynthArgs),
    /// Train the residual refiner.
    Train(TrainArgs),
    /// Refine coarse scores and re-weight them by physical evidence.
    Refine(RefineArgs),
    /// Score a prediction.
    Eval(EvalArgs),
    /// Run the four-row ablation on the demo benchmark.
    Ablate(AblateArgs),
}

#[derive(Debug, Subcommand)]
pub enum PckgCommand {
    /// Check a knowledge graph and print a summary.
    Validate {
        #[arg(long)]
        pckg: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Build a knowledge graph from a vocabulary via an LLM provider.
    Extract(ExtractArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Vocabulary file, one term per line.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Replay recorded answers from this directory.
    #[arg(long, conflicts_with = "endpoint")]
    pub fixtures: Option<PathBuf>,
    /// Chat-completions endpoint for live extraction.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Noise {
    Uniform,
    Gaussian,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Write the demo benchmark (graph, fixtures, train and test scenes).
    #[arg(long, conflicts_with_all = ["pckg", "labels"])]
    pub demo: bool,
    #[arg(long, required_unless_present = "demo")]
    pub pckg: Option<PathBuf>,
    #[arg(long, required_unless_present = "demo")]
    pub labels: Option<PathBuf>,
    /// Comma-separated subset of ndvi,dem,sar.
    #[arg(long, value_delimiter = ',')]
    pub modalities: Option<Vec<String>>,
    #[arg(long, value_enum)]
    pub noise: Option<Noise>,
    #[arg(long)]
    pub smoothing: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Clone)]
pub struct SceneArgs {
    /// Scene directory holding labels.pgrd, features.pgrd, coarse.pgrd and
    /// optional ndvi.pgrd / dem.pgrd / sar.pgrd. Repeatable.
    #[arg(long = "scene")]
    pub scenes: Vec<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub coarse: Option<PathBuf>,
    /// Rasters as modality=PATH pairs, e.g. `ndvi=a.pgrd,sar=b.pgrd`.
    #[arg(long)]
    pub rasters: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub pckg: PathBuf,
    #[command(flatten)]
    pub scenes: SceneArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Train without the physics-consistency term.
    #[arg(long)]
    pub no_phys_loss: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Visual,
    Physical,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub pckg: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub coarse: PathBuf,
    #[arg(long)]
    pub rasters: Option<String>,
    #[arg(long, value_enum, default_value = "physical")]
    pub mode: Mode,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pckg: PathBuf,
    /// Predicted label mask.
    #[arg(long)]
    pub labels: PathBuf,
    /// Ground-truth label mask.
    #[arg(long)]
    pub gt: PathBuf,
    /// Rasters used for the plausibility rate (and as the synthetic side of
    /// the reliability report).
    #[arg(long)]
    pub rasters: Option<String>,
    /// Reference rasters compared against `--rasters` over the ground truth.
    #[arg(long)]
    pub reference: Option<String>,
    /// Count label 0 as a class.
    #[arg(long)]
    pub include_background: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Run only the baseline row.
    #[arg(long)]
    pub baseline_only: bool,
    #[command(flatten)]
    pub common: Common,
}
