//! `phendiff` command line: dataset synthesis, training, sampling, inversion,
//! translation, dose grids and evaluation.
//!
//! Every subcommand reads an optional TOML file given by `--config`; flags
//! override its values. The resolved configuration is written next to the
//! outputs. Exit codes: 0 on success, 1 for invalid input, 2 for runtime
//! failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "phendiff", version, about = "Image-to-image translation of cell images with conditional diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic phenotype benchmark.
    Synth(SynthArgs),
    /// Train a conditional denoiser on a dataset.
    Train(TrainArgs),
    /// Generate images from Gaussian noise or from saved latents.
    Sample(SampleArgs),
    /// Map images to their latents under the source condition.
    Invert(InvertArgs),
    /// Translate images from the source condition to target conditions.
    Translate(TranslateArgs),
    /// Translate one image to every concentration of every treatment.
    Grid(GridArgs),
    /// Compare translated (or given) image sets with real ones.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with benchmark settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; must be absent or empty.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    images_per_condition: Option<usize>,
    /// Images per condition kept for the held-out split.
    #[arg(long)]
    heldout_per_condition: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or manifest.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run directory for checkpoints and the loss log.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from this `-live.ckpt`; its `-ema.ckpt` sibling is loaded too.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated condition names; all conditions when omitted.
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<String>>,
    /// Images drawn per target condition.
    #[arg(long)]
    images_per_condition: Option<usize>,
    /// Start from latents written by `invert` instead of fresh noise.
    #[arg(long)]
    latents: Option<PathBuf>,
    /// Number of sampling steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// PNG files or directories of PNG files.
    #[arg(long, num_args = 1..)]
    input: Option<Vec<PathBuf>>,
    /// Condition the inputs belong to.
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// PNG files or directories of PNG files.
    #[arg(long, num_args = 1..)]
    input: Option<Vec<PathBuf>>,
    #[arg(long)]
    source: Option<String>,
    /// Comma-separated condition names; every other condition when omitted.
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<String>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// A single PNG file.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model whose translations are evaluated.
    #[arg(long, conflicts_with = "generated")]
    checkpoint: Option<PathBuf>,
    /// Directory with one subdirectory of PNG files per condition, compared
    /// as is instead of translating with a model.
    #[arg(long)]
    generated: Option<PathBuf>,
    /// Dataset directory or manifest supplying the real images.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Real images to compare with: heldout, train or all.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Held-out control images to translate.
    #[arg(long)]
    sources: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
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
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Invert(a) => commands::invert(a),
        Command::Translate(a) => commands::translate(a),
        Command::Grid(a) => commands::grid(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
