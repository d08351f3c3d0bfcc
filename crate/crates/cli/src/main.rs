//! `defreg`: synthesize data, train, evaluate and register.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "defreg", version, about = "Unsupervised multimodal deformable registration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic shapes dataset or simulate a new modality for an existing one.
    Synthesize(SynthesizeArgs),
    /// Train registration, translation and projection networks jointly.
    Train(TrainArgs),
    /// Score a checkpoint (or the identity field) on a dataset split.
    Evaluate(EvaluateArgs),
    /// Register one image pair with a trained checkpoint.
    Register(RegisterArgs),
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    /// Generate random-ellipse shapes.
    #[arg(long, conflicts_with = "from", required_unless_present = "from")]
    pub shapes: bool,
    /// Existing dataset whose source images get a synthesized target modality.
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Training pairs (shapes only).
    #[arg(long, default_value_t = 20)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub val_pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub test_pairs: usize,
    /// Image side length (shapes only).
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Elastic control-grid spacing in pixels (default scales with the size).
    #[arg(long)]
    pub control_grid_spacing: Option<f64>,
    /// Maximum control-point displacement in pixels.
    #[arg(long)]
    pub max_displacement: Option<f64>,
    /// Gaussian smoothing of the field in pixels.
    #[arg(long)]
    pub smoothing_sigma: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    Forward,
    Backward,
    Both,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
            Direction::Both => "both",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root (train/ and optionally val/).
    #[arg(long)]
    pub data: PathBuf,
    /// JSON file with TrainConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run name; defaults to the variant name.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, value_parser = ["full", "no_local", "no_global", "no_local_global"])]
    pub variant: Option<String>,
    #[arg(long, value_enum, default_value_t = Direction::Forward)]
    pub direction: Direction,
    /// Checkpoint to continue from; its run directory is reused.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub decay_start_epoch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Skip writing sample montages.
    #[arg(long)]
    pub no_samples: bool,
    /// Root for run directories.
    #[arg(long, env = "DEFREG_RUNS_DIR", default_value = "runs")]
    pub runs_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trained checkpoint.
    #[arg(long, conflicts_with = "identity", required_unless_present = "identity")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the zero displacement field (unregistered baseline).
    #[arg(long)]
    pub identity: bool,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub split: String,
    /// `forward` scores the stored orientation, `backward` the swapped one.
    #[arg(long, value_enum, default_value_t = Direction::Forward)]
    pub direction: Direction,
    /// Report directory (default: eval/<run name>/<direction>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Moving image (grayscale PNG).
    #[arg(long)]
    pub source: PathBuf,
    /// Fixed image (grayscale PNG).
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Grid line spacing of the overlay, in pixels.
    #[arg(long, default_value_t = 8)]
    pub grid_step: usize,
}

/// Failure classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<defreg_core::Error> for Failure {
    fn from(e: defreg_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow::anyhow!("{msg}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synthesize(a) => commands::synthesize(&a),
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Register(a) => commands::register(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
