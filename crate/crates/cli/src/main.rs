//! `ctnet`: train, run, evaluate and inspect CTNet denoisers.

mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ctnet", version, about = "Cross-transformer image denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on clean images with synthetic Gaussian noise.
    Train(TrainArgs),
    /// Denoise one image.
    Denoise(DenoiseArgs),
    /// PSNR table over a dataset and noise levels.
    Eval(EvalArgs),
    /// Parameter and operation counts per block.
    Inspect(InspectArgs),
    /// Finite-difference check of the end-to-end gradient.
    Gradcheck(GradcheckArgs),
    /// Layer-similarity (linear CKA) profile of a trained model.
    Cka(CkaArgs),
    /// Write procedural clean images for toy runs.
    Synth(SynthArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration: JSON file or preset (tiny, paper, tiny-color, ...).
    #[arg(long)]
    pub config: Option<String>,
    /// Manifest JSON or directory of clean training images.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Manifest JSON or directory of clean validation images.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Output directory for checkpoint.ckpt, metrics.csv and run.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for initialization, sampling and noise.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed noise level (8-bit standard deviation).
    #[arg(long, conflicts_with = "blind")]
    pub sigma: Option<f64>,
    /// Blind training: per-patch sigma drawn uniformly from [LO, HI].
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    pub blind: Option<Vec<f64>>,
    /// Desk-scale model and schedule.
    #[arg(long)]
    pub tiny: bool,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Continue from a checkpoint with optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Treat the input as clean: add this much noise first and report PSNR.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also save the synthesized noisy image here.
    #[arg(long)]
    pub noisy_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Manifest JSON or directory of clean test images.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated noise levels, evaluated in the given order.
    #[arg(long, default_value = "15,25,50", value_delimiter = ',')]
    pub sigmas: Vec<f64>,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset label in the table (defaults to the dataset file name).
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct InspectArgs {
    /// JSON file or preset; the full-size color model by default.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long)]
    pub tiny: bool,
    /// Image height and width for the operation count.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [48, 48])]
    pub size: Vec<usize>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// JSON file or preset.
    #[arg(long, default_value = "tiny")]
    pub config: String,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Number of random parameter coordinates.
    #[arg(long, default_value_t = 128)]
    pub coords: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct CkaArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Manifest JSON or directory of probe images.
    #[arg(long)]
    pub images: PathBuf,
    /// Output directory for cka_matrix.csv, cka_ratios.csv and cka_heatmap.pgm.
    #[arg(long)]
    pub out: PathBuf,
    /// Heatmap pixels per matrix entry.
    #[arg(long, default_value_t = 4)]
    pub cell: usize,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 48)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn init_threads() -> error::CliResult {
    if let Ok(v) = std::env::var("CTNET_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| error::CliError::config(format!("CTNET_THREADS={v} is not a number")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| error::CliError::config(format!("cannot set up {n} worker threads: {e}")))?;
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Denoise(a) => commands::denoise(a),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Cka(a) => commands::cka(a),
        Command::Synth(a) => commands::synth(a),
    });
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
