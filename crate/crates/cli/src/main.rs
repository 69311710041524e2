//! Command-line pipeline for CAN bus intrusion detection: synthesize
//! captures, split datasets, train the generative classifier, and score
//! traffic.
//!
//! Exit codes: 0 on success, 1 when valid work fails (IO, divergence,
//! corrupt inputs), 2 for configuration and usage problems.

mod commands;
mod config;

use std::path::PathBuf;
use std::process;

use canids_core::classifier::TrainingMode;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "canids",
    version,
    about = "Generative intrusion detection for CAN bus captures"
)]
struct Cli {
    /// TOML configuration file; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled capture and its manifest.
    Gen(GenArgs),
    /// Split one labeled capture into train and test logs.
    Split(SplitArgs),
    /// Fit a classifier; write a checkpoint, loss trace, and metadata.
    Train(TrainArgs),
    /// Write per-frame class probabilities for a capture.
    Predict(PredictArgs),
    /// Score a labeled capture and report detection metrics.
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// Output capture path.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest path; defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Capture length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Attack window `attack:start:end` in seconds, repeatable; replaces
    /// any windows from the config file.
    #[arg(long = "window", value_name = "ATTACK:START:END")]
    pub windows: Vec<String>,
}

#[derive(Args)]
pub struct SplitArgs {
    /// Labeled capture to split.
    #[arg(long)]
    pub input: PathBuf,
    /// Where the training-side log goes.
    #[arg(long)]
    pub train_out: PathBuf,
    /// Where the test-side log goes.
    #[arg(long)]
    pub test_out: PathBuf,
    /// Manifest path; defaults to `<train-out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Train-to-test frame ratio.
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Input format: `synthetic` or `car_hacking`.
    #[arg(long)]
    pub format: Option<String>,
    /// Attack meant by `T` flags in a car_hacking capture.
    #[arg(long)]
    pub attack_label: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Labeled training capture; repeatable.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV path; defaults to `<out>.trace.csv`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Continue training from this checkpoint instead of initializing.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Accumulate gradients single-threaded; the result is identical, only
    /// slower on multicore machines.
    #[arg(long)]
    pub sequential: bool,
    /// Balance the training set to this many frames per attack (0 keeps
    /// every frame).
    #[arg(long)]
    pub per_attack: Option<usize>,
    /// Normal-to-attack ratio inside each balanced subset.
    #[arg(long)]
    pub normal_ratio: Option<f64>,
    /// Training objective: `full_elbo` or `zero_perturbation`.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<TrainingMode>,
    /// Importance-sample count stored for prediction.
    #[arg(long)]
    pub k: Option<usize>,
    /// Input format: `synthetic` or `car_hacking`.
    #[arg(long)]
    pub format: Option<String>,
    /// Attack meant by `T` flags in a car_hacking capture.
    #[arg(long)]
    pub attack_label: Option<String>,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Capture to score.
    #[arg(long)]
    pub input: PathBuf,
    /// Prediction CSV output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Importance-sample count per class; defaults to the checkpoint's.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Input format: `synthetic` or `car_hacking`.
    #[arg(long)]
    pub format: Option<String>,
    /// Attack meant by `T` flags in a car_hacking capture.
    #[arg(long)]
    pub attack_label: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled capture to score.
    #[arg(long)]
    pub input: PathBuf,
    /// JSON report path; defaults to `<input>.eval.json`.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
    /// Also write the text table here (it always prints to stdout).
    #[arg(long)]
    pub text_out: Option<PathBuf>,
    /// Importance-sample count per class; defaults to the checkpoint's.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Input format: `synthetic` or `car_hacking`.
    #[arg(long)]
    pub format: Option<String>,
    /// Attack meant by `T` flags in a car_hacking capture.
    #[arg(long)]
    pub attack_label: Option<String>,
}

fn parse_mode(s: &str) -> Result<TrainingMode, String> {
    match s {
        "full_elbo" => Ok(TrainingMode::FullElbo),
        "zero_perturbation" => Ok(TrainingMode::ZeroPerturbation),
        other => Err(format!("expected full_elbo or zero_perturbation, got {other:?}")),
    }
}

fn main() {
    let cli = Cli::parse();
    let config = match RunConfig::load(cli.config.as_deref()) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: {e:#}");
            process::exit(2);
        }
    };
    let result = match cli.command {
        Command::Gen(args) => commands::gen::run(config, args),
        Command::Split(args) => commands::split::run(config, args),
        Command::Train(args) => commands::train::run(config, args),
        Command::Predict(args) => commands::predict::run(config, args),
        Command::Eval(args) => commands::eval::run(config, args),
    };
    if let Err(failure) = result {
        eprintln!("error: {:#}", failure.error());
        process::exit(failure.exit_code());
    }
}
