//! Command-line front end for the user-state training framework.
//!
//! Seven subcommands cover the pipeline end to end: `synth` writes a
//! synthetic dataset, `preprocess` normalizes faces and resolves audio
//! latents, `train-codec` pretrains the audio codec, `train` runs the
//! combined semi-supervised loop, `distill` filters unlabeled pools
//! through a checkpoint, `evaluate` scores a checkpoint or cross-validates
//! from scratch, and `report` re-renders stored results.
//!
//! Every run resolves one layered configuration (defaults, file,
//! flags), embeds its hash in all artifacts, and logs line-delimited
//! JSON. Configuration and missing-input errors exit with status 2;
//! runtime failures write `failure.json` into the run directory and
//! exit with status 1.

mod config;
mod datasets;
mod reporting;
mod run;
mod training;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use thiserror::Error;

use userstate_core::face::RotationMode;
use userstate_core::synth::AudioMode;

use crate::config::{Overrides, RunConfig};
use crate::datasets::AudioInput;
use crate::run::{require_inputs, with_context};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing inputs:\n  {}", .0.join("\n  "))]
    MissingInputs(Vec<String>),
    #[error(transparent)]
    Data(#[from] userstate_core::data::DataError),
    #[error(transparent)]
    Synth(#[from] userstate_core::synth::SynthError),
    #[error(transparent)]
    Face(#[from] userstate_core::face::FaceError),
    #[error(transparent)]
    Audio(#[from] userstate_core::audio::AudioError),
    #[error(transparent)]
    Codec(#[from] userstate_core::codec::CodecError),
    #[error(transparent)]
    Backbone(#[from] userstate_core::backbone::BackboneError),
    #[error(transparent)]
    Trainer(#[from] userstate_core::trainer::TrainerError),
    #[error(transparent)]
    Eval(#[from] userstate_core::eval::EvalError),
    #[error(transparent)]
    Augment(#[from] userstate_core::augment::AugmentError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for configuration and missing-input errors, 1 for runtime
    /// failures.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::MissingInputs(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "userstate", version, about = "Semi-supervised user-state classification")]
struct Cli {
    /// JSON configuration file merged over compiled defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Root seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace the training section with the published recipe.
    #[arg(long, global = true)]
    paper_preset: bool,
    /// Print the resolved configuration and hash, then exit.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Parent directory for fresh run directories.
    #[arg(long, global = true, value_name = "DIR")]
    runs: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with hidden ground truth.
    Synth(SynthArgs),
    /// Normalize face clips and resolve audio latents.
    Preprocess(PreprocessArgs),
    /// Pretrain the audio codec on waveform chunks.
    TrainCodec(TrainCodecArgs),
    /// Run the combined semi-supervised training loop.
    Train(TrainArgs),
    /// Filter unlabeled pools through a trained checkpoint.
    Distill(DistillArgs),
    /// Score a checkpoint or cross-validate from scratch.
    Evaluate(EvaluateArgs),
    /// Re-render the report of a finished evaluation run.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Labeled example count.
    #[arg(long)]
    labeled: Option<usize>,
    /// Unlabeled pool size (per modality).
    #[arg(long)]
    unlabeled: Option<usize>,
    /// Fraction of unlabeled items drawn from the non-neutral classes.
    #[arg(long)]
    rare_rate: Option<f64>,
    /// Noise level; zero emits exact class templates.
    #[arg(long)]
    noise: Option<f64>,
    /// Fraction of labeled items with deliberately wrong labels.
    #[arg(long)]
    label_noise: Option<f64>,
    /// Audio payload: "latent" or "waveform".
    #[arg(long)]
    audio_mode: Option<String>,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Source dataset directory.
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Rotation handling: "relative_to_first" or "per_frame_delta".
    #[arg(long)]
    rotation_mode: Option<String>,
    /// Codec checkpoint; encodes stored waveforms instead of copying
    /// stored latents.
    #[arg(long, value_name = "FILE")]
    codec: Option<PathBuf>,
}

#[derive(Args)]
struct TrainCodecArgs {
    /// Waveform dataset; omitted runs on a synthetic corpus.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Synthetic corpus size when no dataset is given.
    #[arg(long)]
    synthetic_chunks: Option<usize>,
    /// Exact run directory instead of a fresh one under the runs root.
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Preprocessed dataset directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Exact run directory instead of a fresh one under the runs root.
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
    /// Labeled fraction held out for validation; zero disables.
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(Args)]
struct DistillArgs {
    /// Preprocessed dataset directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Trained bundle checkpoint.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Exact run directory instead of a fresh one under the runs root.
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
    /// Epoch recorded as the pool's source.
    #[arg(long, default_value_t = 0)]
    source_epoch: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Preprocessed dataset directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Trained bundle checkpoint; omitted runs cross-validation.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Exact run directory instead of a fresh one under the runs root.
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory of a finished evaluation.
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
}

fn parse_audio_mode(s: &str) -> Result<AudioMode, CliError> {
    match s {
        "latent" => Ok(AudioMode::Latent),
        "waveform" => Ok(AudioMode::Waveform),
        other => Err(CliError::Config(format!(
            "audio mode {other:?} is not one of \"latent\", \"waveform\""
        ))),
    }
}

fn parse_rotation_mode(s: &str) -> Result<RotationMode, CliError> {
    match s {
        "relative_to_first" => Ok(RotationMode::RelativeToFirst),
        "per_frame_delta" => Ok(RotationMode::PerFrameDelta),
        other => Err(CliError::Config(format!(
            "rotation mode {other:?} is not one of \"relative_to_first\", \"per_frame_delta\""
        ))),
    }
}

/// Folds per-command flags into the resolved configuration.
fn overlay(cfg: &mut RunConfig, command: &Command) -> Result<(), CliError> {
    match command {
        Command::Synth(args) => {
            if let Some(n) = args.labeled {
                cfg.synth.labeled = n;
            }
            if let Some(n) = args.unlabeled {
                cfg.synth.unlabeled = n;
            }
            if let Some(r) = args.rare_rate {
                cfg.synth.rare_rate = r;
            }
            if let Some(s) = args.noise {
                cfg.synth.noise = s;
            }
            if let Some(s) = args.label_noise {
                cfg.synth.label_noise = s;
            }
            if let Some(mode) = &args.audio_mode {
                cfg.synth.audio_mode = parse_audio_mode(mode)?;
            }
        }
        Command::Preprocess(args) => {
            if let Some(mode) = &args.rotation_mode {
                cfg.rotation_mode = parse_rotation_mode(mode)?;
            }
        }
        Command::Train(args) => {
            if let Some(f) = args.val_fraction {
                cfg.val_fraction = f;
            }
        }
        _ => {}
    }
    config::validate(cfg)
}

fn dispatch(cfg: &RunConfig, command: &Command) -> Result<(), CliError> {
    match command {
        Command::Synth(args) => {
            with_context("synth", cfg, Some(&args.out), |ctx| datasets::synth(ctx, cfg))
        }
        Command::Preprocess(args) => {
            let codec = args.codec.as_deref();
            if let Some(path) = codec {
                require_inputs(&[("codec checkpoint", path)])?;
            }
            let audio = if codec.is_some() { AudioInput::Waveforms } else { AudioInput::Latents };
            datasets::check_dataset_inputs(&args.input, true, Some(audio))?;
            with_context("preprocess", cfg, Some(&args.out), |ctx| {
                datasets::preprocess(ctx, cfg, &args.input, codec)
            })
        }
        Command::TrainCodec(args) => {
            if let Some(data) = &args.data {
                datasets::check_dataset_inputs(data, false, Some(AudioInput::Waveforms))?;
            }
            with_context("train-codec", cfg, args.run_dir.as_deref(), |ctx| {
                training::train_codec(ctx, cfg, args.data.as_deref(), args.synthetic_chunks)
            })
        }
        Command::Train(args) => {
            datasets::check_dataset_inputs(&args.data, true, Some(AudioInput::Latents))?;
            with_context("train", cfg, args.run_dir.as_deref(), |ctx| {
                training::train(ctx, cfg, &args.data)
            })
        }
        Command::Distill(args) => {
            require_inputs(&[("bundle checkpoint", &args.checkpoint)])?;
            datasets::check_dataset_inputs(&args.data, true, Some(AudioInput::Latents))?;
            with_context("distill", cfg, args.run_dir.as_deref(), |ctx| {
                training::distill(ctx, cfg, &args.data, &args.checkpoint, args.source_epoch)
            })
        }
        Command::Evaluate(args) => {
            if let Some(path) = &args.checkpoint {
                require_inputs(&[("bundle checkpoint", path)])?;
            }
            datasets::check_dataset_inputs(&args.data, true, Some(AudioInput::Latents))?;
            with_context("evaluate", cfg, args.run_dir.as_deref(), |ctx| {
                reporting::evaluate(ctx, cfg, &args.data, args.checkpoint.as_deref())
            })
        }
        Command::Report(args) => reporting::report(&args.run),
    }
}

fn run_cli(cli: &Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        paper_preset: cli.paper_preset,
        runs_root: cli.runs.clone(),
    };
    let mut cfg = config::resolve(cli.config.as_deref(), &overrides)?;
    overlay(&mut cfg, &cli.command)?;
    if cli.dry_run {
        return config::emit_resolved(&cfg);
    }
    dispatch(&cfg, &cli.command)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_cli(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
