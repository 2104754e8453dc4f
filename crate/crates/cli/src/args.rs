use std::path::PathBuf;

use clap::{ArgAction, ArgGroup, Args, Parser, Subcommand};
use msresnet::DType;

/// Train and evaluate the improved ResNet34 brain-tumor classifier.
///
/// Every subcommand accepts `--config FILE`: a plain `key = value` file whose
/// keys are long flag names. Flags given on the command line win.
#[derive(Debug, Parser)]
#[command(name = "msresnet", version, args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw the stratified train/validation/test split and print its counts
    Split(SplitArgs),
    /// Train one model; writes the best checkpoint and the loss curves
    Train(TrainCmd),
    /// Score a checkpoint; writes per-class metrics and the confusion matrix
    Eval(EvalArgs),
    /// Train the five ablation models and write the accuracy table
    Ablation(AblationArgs),
    /// Stratified k-fold cross-validation of one model
    Kfold(KfoldArgs),
    /// Finite-difference gradient checks of every op and block
    Gradcheck(GradcheckArgs),
    /// Parameter counts
    Params(ParamsArgs),
    /// Write a procedural PNG dataset to disk
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Base seed; split, init, augment and shuffle streams derive from it
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// key=value defaults for any long flag of this subcommand
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["data", "synthetic"])))]
pub struct DataArgs {
    /// Image directory laid out as <root>/<class>/*.png
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Generate N synthetic images per class instead of reading a directory
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Side length of generated synthetic images
    #[arg(long, default_value_t = 64, value_name = "PX")]
    pub synthetic_size: usize,
    /// Split file written by `split`; drawn from --seed when absent
    #[arg(long, value_name = "FILE")]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ArchArgs {
    /// Stage widths
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_value = "64,128,256,512", value_name = "W1,W2,W3,W4")]
    pub widths: Vec<usize>,
    /// Residual blocks per stage
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_value = "3,4,6,3", value_name = "D1,D2,D3,D4")]
    pub depths: Vec<usize>,
    /// Network input side length
    #[arg(long, default_value_t = 224, value_name = "PX")]
    pub resolution: usize,
    /// SE bottleneck reduction ratio
    #[arg(long, default_value_t = 16)]
    pub se_reduction: usize,
    /// Input channels (1 or 3); defaults to the dataset's
    #[arg(long)]
    pub channels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModuleArgs {
    /// Ablation preset: 1 baseline, 2 A, 3 B, 4 C, 5 A+B+C
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub preset: u8,
    /// Explicit module set overriding --preset, e.g. "A,C" or "none"
    /// (A: inception downsampling, B: multi-scale stem, C: SE)
    #[arg(long, value_name = "LIST")]
    pub modules: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Initial learning rate
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    /// Learning-rate multiplier applied every --decay-every epochs
    #[arg(long, default_value_t = 0.1)]
    pub decay_factor: f64,
    #[arg(long, default_value_t = 100)]
    pub decay_every: usize,
    /// Batch size for validation and test inference
    #[arg(long, default_value_t = 64)]
    pub eval_batch_size: usize,
    /// Floating-point precision: f32 or f64
    #[arg(long, default_value_t = DType::F32)]
    pub precision: DType,
    /// Disable random crops, flips and brightness jitter
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["data", "synthetic", "sizes", "table1_sizes"])))]
pub struct SplitArgs {
    #[command(flatten)]
    pub common: Common,
    /// Image directory laid out as <root>/<class>/*.png
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Synthetic images per class
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Explicit class sizes
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, value_name = "N1,N2,...")]
    pub sizes: Option<Vec<usize>>,
    /// Use the four class sizes of the reference MRI dataset
    #[arg(long)]
    pub table1_sizes: bool,
    /// Directory for split.txt and split_counts.csv
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub modules: ModuleArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Part {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint written by `train`
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Which part of the split to score
    #[arg(long, value_enum, default_value_t = Part::Test)]
    pub part: Part,
    /// Floating-point precision to evaluate in
    #[arg(long, default_value_t = DType::F32)]
    pub precision: DType,
    #[arg(long, default_value_t = 64)]
    pub eval_batch_size: usize,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Also report each model's k-fold average accuracy
    #[arg(long, value_name = "K")]
    pub kfold: Option<usize>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct KfoldArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub modules: ModuleArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Number of folds
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Seeds per case (seed .. seed + N)
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Maximum relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Restrict to cases whose name contains this string
    #[arg(long)]
    pub only: Option<String>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub modules: ModuleArgs,
    /// List all five ablation models with their ratio to the baseline
    #[arg(long)]
    pub all: bool,
    /// Number of output classes
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Images per class
    #[arg(long, default_value_t = 32)]
    pub per_class: usize,
    /// Side length in pixels
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Output directory (one subdirectory per class)
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}
