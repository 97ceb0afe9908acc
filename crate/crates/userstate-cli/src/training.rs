//! Training commands: codec pretraining, the combined semi-supervised
//! run, and standalone pool distillation.

use serde_json::json;
use std::io::Write;
use std::path::Path;

use userstate_core::audio::AudioChunk;
use userstate_core::codec::{self, SplitSpec};
use userstate_core::data::{make_index_folds, DatasetStore, UnlabeledPool};
use userstate_core::synth::{distillation_audit, generate_codec_corpus};
use userstate_core::trainer::{self, DistillOutcome, TrainData, TrainOptions, TrainSinks};
use userstate_core::backbone::ModelBundle;
use userstate_core::util::{mix_seed, stream};

use crate::config::RunConfig;
use crate::datasets::require_normalized;
use crate::run::RunContext;
use crate::CliError;

fn dataset_chunks(store: &DatasetStore) -> Result<Vec<AudioChunk>, CliError> {
    let mut corpus = Vec::new();
    for entry in &store.manifest.entries {
        if !entry.has_audio {
            continue;
        }
        let rows = store.read_waveform(&entry.media_id)?;
        for row in rows.rows() {
            corpus.push(AudioChunk::new(row.iter().map(|&v| v as f64).collect())?);
        }
    }
    Ok(corpus)
}

/// Trains the audio codec on waveform chunks, either from a stored
/// dataset or from a synthetic corpus, and checkpoints the result.
pub fn train_codec(
    ctx: &mut RunContext,
    config: &RunConfig,
    data: Option<&Path>,
    synthetic_chunks: Option<usize>,
) -> Result<serde_json::Value, CliError> {
    let (corpus, source) = match data {
        Some(path) => {
            let store = DatasetStore::open(path)?;
            let corpus = dataset_chunks(&store)?;
            if corpus.is_empty() {
                return Err(CliError::Config(format!(
                    "{} holds no waveform chunks; synthesize with audio_mode = \"waveform\"",
                    path.display()
                )));
            }
            (corpus, json!(path.display().to_string()))
        }
        None => {
            let n = synthetic_chunks.unwrap_or(config.synth.codec_chunks);
            (generate_codec_corpus(n, config.seed)?, json!({ "synthetic_chunks": n }))
        }
    };
    ctx.log_event("corpus", json!({ "chunks": corpus.len(), "source": source }));

    let split = SplitSpec::from_ratios(corpus.len(), (0.7, 0.15, 0.15), config.seed)?;
    let outcome = codec::train_codec(&corpus, &split, &config.codec, &config.codec_train)?;

    let metrics_path = ctx.dir().join("codec_metrics.jsonl");
    let mut metrics = std::fs::File::create(&metrics_path)
        .map_err(|e| CliError::Io { path: metrics_path.display().to_string(), source: e })?;
    for stats in &outcome.history {
        writeln!(metrics, "{}", serde_json::to_string(stats)?)
            .map_err(|e| CliError::Io { path: metrics_path.display().to_string(), source: e })?;
    }
    let ckpt = ctx.dir().join("codec.ckpt");
    outcome.model.save(&ckpt)?;

    Ok(json!({
        "chunks": corpus.len(),
        "epochs": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "diverged_at": outcome.diverged_at,
        "checkpoint": ckpt.display().to_string(),
    }))
}

/// Splits labeled examples into train/validation index sets. A zero
/// fraction keeps everything in training.
fn split_validation(
    n: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), CliError> {
    if fraction == 0.0 {
        return Ok(((0..n).collect(), Vec::new()));
    }
    let folds = ((1.0 / fraction).round() as usize).max(2);
    if n < folds {
        return Err(CliError::Config(format!(
            "validation fraction {fraction} needs at least {folds} labeled examples, found {n}"
        )));
    }
    let fold = make_index_folds(n, folds, mix_seed(seed, &[stream::SPLIT]))?
        .into_iter()
        .next()
        .expect("at least one fold");
    Ok((fold.train, fold.val))
}

/// Runs the combined training loop on a preprocessed dataset and saves
/// the final bundle plus per-epoch metrics and checkpoints.
pub fn train(
    ctx: &mut RunContext,
    config: &RunConfig,
    data: &Path,
) -> Result<serde_json::Value, CliError> {
    let store = DatasetStore::open(data)?;
    require_normalized(&store, "train")?;

    let labeled: Vec<_> = store.load_labeled()?.into_iter().map(|(_, ex)| ex).collect();
    let pools = store.load_unlabeled()?;
    let UnlabeledPool::Audio(unlabeled_audio) = pools.audio else {
        return Err(CliError::Config("stored audio pool has the wrong modality".into()));
    };
    let UnlabeledPool::Face(unlabeled_face) = pools.face else {
        return Err(CliError::Config("stored face pool has the wrong modality".into()));
    };

    let (train_idx, val_idx) = split_validation(labeled.len(), config.val_fraction, config.seed)?;
    let validation: Vec<_> = val_idx.iter().map(|&i| labeled[i].clone()).collect();
    let training: Vec<_> = train_idx.iter().map(|&i| labeled[i].clone()).collect();
    ctx.log_event(
        "data",
        json!({
            "labeled": training.len(),
            "validation": validation.len(),
            "unlabeled_audio": unlabeled_audio.len(),
            "unlabeled_face": unlabeled_face.len(),
        }),
    );

    let train_data = TrainData::new(training, unlabeled_audio, unlabeled_face, validation)?;
    let opts = TrainOptions {
        config: config.train.clone(),
        optimizer: config.optimizer.clone(),
        policy: config.augment.policy()?,
        infer_batch: config.infer_batch,
    };
    let sinks = TrainSinks {
        checkpoint_dir: Some(ctx.dir().join("checkpoints")),
        metrics_path: Some(ctx.dir().join("metrics.jsonl")),
    };
    let mut bundle = ModelBundle::new(&config.bundle, config.seed)?;
    let outcome = trainer::train(&mut bundle, &train_data, &opts, &sinks)?;
    let ckpt = ctx.dir().join("model.ckpt");
    bundle.save(&ckpt)?;

    Ok(json!({
        "epochs": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_f1": outcome.best_val_f1,
        "final_loss": outcome.history.last().map(|m| m.loss.total),
        "checkpoint": ckpt.display().to_string(),
    }))
}

fn distill_section(
    outcome: &DistillOutcome,
    tau2: f64,
    audit: Option<serde_json::Value>,
) -> serde_json::Value {
    json!({
        "kept": outcome.pool.items.len(),
        "total": outcome.total,
        "tau2": tau2,
        "items": outcome.pool.items,
        "classes": outcome.kept_classes,
        "class_counts": outcome.class_counts,
        "audit": audit,
    })
}

/// Distills both unlabeled pools through a trained bundle and writes the
/// kept indices, classes, and (for synthetic data) an accuracy audit.
pub fn distill(
    ctx: &mut RunContext,
    config: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    source_epoch: usize,
) -> Result<serde_json::Value, CliError> {
    let store = DatasetStore::open(data)?;
    require_normalized(&store, "distill")?;
    let mut bundle = ModelBundle::load(&config.bundle, config.seed, checkpoint)?;
    let pools = store.load_unlabeled()?;

    let tau = config.train.fixmatch_threshold;
    let tau2 = config.train.tau2();
    let audio =
        trainer::distill_pool(&mut bundle, &pools.audio, tau, source_epoch, config.infer_batch)?;
    let face =
        trainer::distill_pool(&mut bundle, &pools.face, tau, source_epoch, config.infer_batch)?;

    type Hidden = (userstate_core::data::ClassLabel, userstate_core::data::ClassLabel);
    let audit = |outcome: &DistillOutcome, pick: fn(&Hidden) -> userstate_core::data::ClassLabel| {
        let hidden: Vec<_> = pools.hidden_labels.as_ref()?.iter().map(pick).collect();
        if outcome.pool.items.is_empty() {
            return None;
        }
        distillation_audit(&hidden, &outcome.pool.items, &outcome.kept_classes)
            .ok()
            .map(|accuracy| json!({ "accuracy": accuracy }))
    };
    let audio_audit = audit(&audio, |pair| pair.0);
    let face_audit = audit(&face, |pair| pair.1);
    ctx.log_event(
        "distilled",
        json!({
            "audio_kept": audio.pool.items.len(),
            "face_kept": face.pool.items.len(),
            "total": audio.total,
        }),
    );

    let record = json!({
        "config_hash": ctx.config_hash(),
        "checkpoint": checkpoint.display().to_string(),
        "source_epoch": source_epoch,
        "threshold": tau,
        "audio": distill_section(&audio, tau2, audio_audit),
        "face": distill_section(&face, tau2, face_audit),
    });
    let path = ctx.dir().join("distilled.json");
    std::fs::write(&path, serde_json::to_string_pretty(&record)?)
        .map_err(|e| CliError::Io { path: path.display().to_string(), source: e })?;

    Ok(json!({
        "audio_kept": audio.pool.items.len(),
        "face_kept": face.pool.items.len(),
        "total": audio.total,
        "distilled": path.display().to_string(),
    }))
}
