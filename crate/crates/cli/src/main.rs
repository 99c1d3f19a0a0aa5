mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Semi-supervised detection toolkit: data generation, training,
/// evaluation, ablation sweeps and plots.
#[derive(Parser, Debug)]
#[command(name = "ssmd-kit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with its train/val/test split.
    GenData(GenDataArgs),
    /// Train a detector and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or a predictions file against ground truth.
    Eval(EvalArgs),
    /// Run the feature ablation ladder over several seeds.
    Ablate(AblateArgs),
    /// Render training curves and detection overlays.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images [default: 100].
    #[arg(long)]
    pub count: Option<usize>,
    /// Generator and split seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of the training split that keeps its labels [default: 0.1].
    #[arg(long)]
    pub labeled_ratio: Option<f64>,
    /// Override a generator setting, e.g. `synthetic.noise=10` or `split.train=0.7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Replace an existing dataset in the output directory.
    #[arg(long)]
    pub force: bool,
}

/// Settings shared by commands that build a run configuration.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Configuration file (TOML), layered over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base settings: `desk` (small, fast) or `paper`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Override any configuration key, e.g. `train.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory written by `gen-data`; defaults to `data.path`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop once this many iterations have run. Checkpoints are written at
    /// epoch ends, so `--resume` replays any steps after the last one.
    #[arg(long, value_name = "ITERATION")]
    pub stop_at: Option<u64>,
    /// Replace an existing run in the output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Supervised,
    Csd,
    Ssmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Labeled,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MetricArg {
    Map,
    Froc,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum WeightsArg {
    /// The best validated student, or the latest one if none was validated.
    Best,
    Last,
    Teacher,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OverlapArg {
    Iou,
    Iobb,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint file or run directory.
    #[arg(long, conflicts_with_all = ["predictions", "ground_truth"])]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory; defaults to the one the checkpoint was trained on.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "best")]
    pub weights: WeightsArg,
    /// Permit `--weights teacher`.
    #[arg(long)]
    pub allow_teacher: bool,
    /// Predictions file (JSON Lines), evaluated against `--ground-truth`.
    #[arg(long, requires = "ground_truth")]
    pub predictions: Option<PathBuf>,
    /// Annotation file (JSON Lines).
    #[arg(long, requires = "predictions")]
    pub ground_truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub metric: MetricArg,
    /// Comma-separated false positives per image for FROC sensitivity.
    #[arg(long, value_delimiter = ',')]
    pub fp_budgets: Option<Vec<f64>>,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub overlap: Option<OverlapArg>,
    /// Directory for report files and detections.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated seeds; each seed gets its own dataset.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Comma-separated ladder steps to run [default: all]. Names:
    /// supervised, csd, +acc, +nrb, +adversarial, +cutout.
    #[arg(long, value_delimiter = ',')]
    pub steps: Option<Vec<String>>,
    /// Images per dataset [default: 400].
    #[arg(long)]
    pub count: Option<usize>,
    /// Fraction of the training split that keeps its labels [default: 0.1].
    #[arg(long)]
    pub labeled_ratio: Option<f64>,
    /// Override a data-generation setting, e.g. `synthetic.noise=10`.
    #[arg(long = "data-set", value_name = "KEY=VALUE")]
    pub data_set: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Run directory with metrics and report files.
    #[arg(long, required_unless_present = "image")]
    pub run: Option<PathBuf>,
    /// Image to draw detections on.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Detections file (JSON Lines) for `--image`.
    #[arg(long, requires = "image", conflicts_with = "checkpoint")]
    pub detections: Option<PathBuf>,
    /// Checkpoint file or run directory used to detect on `--image`.
    #[arg(long, requires = "image")]
    pub checkpoint: Option<PathBuf>,
    /// Lowest score drawn.
    #[arg(long, default_value_t = 0.3)]
    pub min_score: f64,
    /// Output directory for curves, or the PNG path for an overlay.
    /// Defaults to `<run>/plots` and `overlay.png`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Bad invocation: exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<ssmd_core::Error>() {
            return match e {
                ssmd_core::Error::Config(_) => 1,
                ssmd_core::Error::Numerical { .. } => 3,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Plot(a) => plot::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
