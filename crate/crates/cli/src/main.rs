//! `sceneslots`: dataset generation, training, evaluation, visualization and
//! input ablations.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod figures;
mod ppm;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] sceneslots_core::Error),
    #[error(transparent)]
    Data(#[from] sceneslots_data::DataError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(sceneslots_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sceneslots", version, about = "Unsupervised multi-object scene decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset file and a summary next to it.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a checkpoint on held-out scenes.
    Eval(EvalArgs),
    /// Write decomposition, per-iteration, traversal and multi-seed images.
    Visualize(VisualizeArgs),
    /// Train and evaluate one run per removed refinement input plus a baseline.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// tetris, multi-dsprites, multi-dsprites-bin or shapes.
    pub kind: String,
    #[arg(long)]
    pub n: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Tetris canvas size in pixels.
    #[arg(long)]
    pub canvas: Option<usize>,
    /// Tetris pieces per scene.
    #[arg(long)]
    pub pieces: Option<usize>,
    /// Tetris block size in pixels.
    #[arg(long)]
    pub block: Option<usize>,
}

/// Configuration sources, applied in order: preset, file, `--set`.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long, default_value = "tetris-mini")]
    pub preset: String,
    /// key=value file; `#` starts a comment.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides one key, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Progress line interval in steps; 0 disables.
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

/// Where a checkpoint and its model configuration come from.
#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Model configuration; defaults to config.txt next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file whose first records are used. Without it, the held-out
    /// scenes of the training run are regenerated.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Slots at test time; defaults to the training value.
    #[arg(long)]
    pub slots: Option<usize>,
    /// Refinement iterations at test time; defaults to the training value.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Comma-separated refinement inputs to zero out.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = sceneslots_core::evaluation::EVAL_RECORDS)]
    pub records: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated indices into the held-out scenes.
    #[arg(long, default_value = "0")]
    pub records: String,
    /// Inference seeds for the multi-seed rows.
    #[arg(long, default_value_t = 8)]
    pub seeds: u64,
    /// Latent dimensions traversed, in order of decreasing KL.
    #[arg(long, default_value_t = 3)]
    pub dims: usize,
    #[arg(long, default_value_t = 7)]
    pub steps: usize,
    /// Integer upscaling of every image.
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated refinement inputs, one run each.
    #[arg(long)]
    pub flags: String,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Visualize(a) => commands::visualize(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
