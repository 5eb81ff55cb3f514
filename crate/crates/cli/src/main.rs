//! `motionflow`: train, run, evaluate and ablate the flow network.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 when
//! training diverges.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use motionflow::parallel::{set_parallelism, Parallelism};
use motionflow::Error;

#[derive(Parser)]
#[command(name = "motionflow", version, about = "Unsupervised optical flow and stacked motion classification")]
struct Cli {
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the flow network (or, with --stacked, the stacked classifier).
    Train(TrainArgs),
    /// Estimate flow for an image sequence.
    Infer(InferArgs),
    /// Report EPE, Fl and accuracy on a dataset with ground truth.
    Eval(EvalArgs),
    /// Train and evaluate the practice-toggle grid.
    Ablate(AblateArgs),
    /// Render .flo files or export synthetic samples.
    Viz(VizArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output directory, overriding `train.output_dir`.
    #[arg(long, env = "MOTIONFLOW_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// Fine-tune the stacked classifier per the `[stacked]` section.
    #[arg(long)]
    pub stacked: bool,
    /// Flow-network weights to start stacked fine-tuning from.
    #[arg(long, requires = "stacked")]
    pub init: Option<PathBuf>,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Glob matching the input frames; they are taken in sorted order.
    #[arg(long)]
    pub frames: String,
    #[arg(long, env = "MOTIONFLOW_OUT_DIR")]
    pub out_dir: PathBuf,
    /// Write `.flo` files (the default when neither output is chosen).
    #[arg(long)]
    pub flo: bool,
    /// Write colour-coded PNGs.
    #[arg(long)]
    pub png: bool,
    /// Timed passes for the throughput figure (at least 10).
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PredictorKind {
    Model,
    Oracle,
    Zero,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Trained weights; required for `--predictor model`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Run configuration; defaults to the one stored in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PredictorKind::Model)]
    pub predictor: PredictorKind,
    /// Directory of exported samples (see `viz --export`) instead of
    /// synthetic data.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Evaluate on labelled clips (`data.clips`) instead of flow pairs.
    #[arg(long)]
    pub clips: bool,
    /// Number of synthetic samples, overriding `data.eval_samples`.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Print one JSON object instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated rows such as `full,no-ssim,no-cdc+no-smoothness`;
    /// all 32 rows when omitted.
    #[arg(long)]
    pub subset: Option<String>,
    /// Comma-separated training seeds; each row keeps its best seed.
    #[arg(long, default_value = "1")]
    pub seeds: String,
    #[arg(long, env = "MOTIONFLOW_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct VizArgs {
    /// A `.flo` file to render.
    #[arg(long, conflicts_with = "export")]
    pub flo: Option<PathBuf>,
    /// PNG path for `--flo`.
    #[arg(long, requires = "flo")]
    pub out: Option<PathBuf>,
    /// Magnitude mapped to full saturation (99th percentile when omitted).
    #[arg(long)]
    pub max_mag: Option<f64>,
    /// Export this many synthetic samples as PNG frames plus `.flo` ground
    /// truth.
    #[arg(long)]
    pub export: Option<usize>,
    #[arg(long, env = "MOTIONFLOW_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Export labelled clips instead of flow samples.
    #[arg(long)]
    pub clips: bool,
    /// Number of frames per exported sample (the model's input length by
    /// default).
    #[arg(long)]
    pub frames: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } | Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.sequential {
        set_parallelism(Parallelism::Sequential);
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Viz(a) => commands::viz(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
