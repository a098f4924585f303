//! `augsearch`: synthetic data, single augmentations, gradient checks,
//! policy searches, retraining and evaluation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug, Serialize)]
#[command(name = "augsearch", version, about = "Differentiable augmentation policy search for multichannel signals")]
pub struct Cli {
    /// Root seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory for outputs and the run.json provenance record.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Format of summaries printed to stdout and metric files.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate the synthetic planted-invariance dataset.
    Synth(SynthArgs),
    /// Apply one operation (hard mode) to every record of a dataset.
    Augment(AugmentArgs),
    /// Compare relaxed-operation gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Run a policy search and retrain with the result.
    Search(SearchArgs),
    /// Random search over a discrete policy grid.
    RandomSearch(GridSearchArgs),
    /// Rank grid candidates (or given policies) by augmented validation loss.
    DensityMatch(DensityArgs),
    /// Train a model from scratch under a fixed policy.
    Retrain(RetrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Count the discrete policies of a grid.
    SpaceSize(SpaceSizeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum DtypeArg {
    #[value(name = "f64le")]
    F64le,
    #[value(name = "f32le")]
    F32le,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// Number of records.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Samples per window.
    #[arg(long, default_value_t = 1024)]
    pub n_times: usize,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64le)]
    pub dtype: DtypeArg,
    /// Dataset directory; defaults to --out-dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct AugmentArgs {
    /// Operation name, e.g. time_reverse.
    #[arg(long)]
    pub op: String,
    #[arg(long, default_value_t = 0.5)]
    pub p: f64,
    #[arg(long, default_value_t = 0.5)]
    pub mu: f64,
    /// Input dataset directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Montage CSV (name,x,y,z,pair); the built-in 10-20 subset otherwise.
    #[arg(long)]
    pub montage: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    /// Check every operation with a relaxed form.
    #[arg(long, conflicts_with = "op")]
    pub all_ops: bool,
    /// Check a single operation.
    #[arg(long)]
    pub op: Option<String>,
    #[arg(long, default_value_t = 0.6)]
    pub p: f64,
    #[arg(long, default_value_t = 0.45)]
    pub mu: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Args, Debug, Serialize, Clone)]
pub struct DataArgs {
    /// Dataset directory (manifest.json + data.bin).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub valid_fraction: f64,
    /// Keep ceil(n_train / 2^k) training records.
    #[arg(long, default_value_t = 0)]
    pub subset_exponent: u32,
    /// Low-pass cutoff in Hz (7 Hz transition) applied before splitting.
    #[arg(long)]
    pub lowpass: Option<f64>,
    /// Standardize every record and channel before splitting.
    #[arg(long)]
    pub standardize: bool,
    /// Montage CSV (name,x,y,z,pair); the built-in 10-20 subset otherwise.
    #[arg(long)]
    pub montage: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 300)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 30)]
    pub patience: usize,
}

#[derive(Args, Debug, Serialize, Clone)]
pub struct SpaceArgs {
    /// Comma-separated operation names; the differentiable pool by default.
    #[arg(long, value_delimiter = ',')]
    pub pool: Vec<String>,
    /// Subpolicies per policy.
    #[arg(long = "L", default_value_t = 5)]
    pub n_subpolicies: usize,
    /// Operations per subpolicy.
    #[arg(long = "K", default_value_t = 2)]
    pub n_stages: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Adda,
    Cadda,
    Dada,
    FasterAa,
    Random,
    Density,
}

#[derive(Args, Debug, Serialize, Clone)]
pub struct GridArgs {
    /// Probability grid size.
    #[arg(long = "np", default_value_t = 11)]
    pub n_probabilities: usize,
    /// Magnitude grid size.
    #[arg(long = "nmu", default_value_t = 10)]
    pub n_magnitudes: usize,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Sample one policy per class.
    #[arg(long)]
    pub class_wise: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct SearchArgs {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Search epochs for gradient modes.
    #[arg(long, default_value_t = 10)]
    pub budget: usize,
    /// Cap on search steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Retrain every this many search epochs; 0 retrains only at the end.
    #[arg(long, default_value_t = 2)]
    pub retrain_every: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub xi_model: f64,
    #[arg(long, default_value_t = 5e4)]
    pub xi_policy: f64,
    /// Finite-difference step is this over the validation gradient norm.
    #[arg(long, default_value_t = 0.01)]
    pub epsilon_scale: f64,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub space: SpaceArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct GridSearchArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub space: SpaceArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct DensityArgs {
    /// Policy files to rank instead of grid samples.
    #[arg(long, num_args = 1..)]
    pub candidates: Vec<PathBuf>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub space: SpaceArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct RetrainArgs {
    /// Policy file; no augmentation when omitted.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    All,
    Train,
    Valid,
    Test,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Records to score; split flags select the same partition as training.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct SpaceSizeArgs {
    #[arg(long = "np")]
    pub n_probabilities: u64,
    #[arg(long = "nmu")]
    pub n_magnitudes: u64,
    #[arg(long = "nops")]
    pub n_ops: u64,
    #[arg(long = "L")]
    pub n_subpolicies: u32,
    #[arg(long = "K")]
    pub n_stages: u32,
    #[arg(long, default_value_t = 1)]
    pub classes: u32,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
