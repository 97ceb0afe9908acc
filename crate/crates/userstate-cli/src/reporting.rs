//! Evaluation commands: scoring a checkpoint, running cross-validation,
//! and re-rendering a stored report.

use serde_json::json;
use std::path::Path;

use userstate_core::backbone::ModelBundle;
use userstate_core::data::{DatasetStore, LabeledExample, UnlabeledPool};
use userstate_core::eval::{
    self, confusion_counts, f1_per_class, macro_f1, render_report, row_normalize, EvalReport,
    Head, HeadReport,
};
use userstate_core::trainer::TrainOptions;

use crate::config::RunConfig;
use crate::datasets::require_normalized;
use crate::run::{require_inputs, RunContext};
use crate::CliError;

fn score_head(
    bundle: &mut ModelBundle,
    head: Head,
    examples: &[LabeledExample],
    infer_batch: usize,
) -> Result<HeadReport, CliError> {
    let covered: Vec<&LabeledExample> = examples.iter().filter(|ex| head.covers(ex)).collect();
    if covered.is_empty() {
        return Ok(HeadReport {
            head,
            macro_f1_folds: Vec::new(),
            macro_f1_mean: 0.0,
            macro_f1_std: 0.0,
            f1_mean: [0.0; 4],
            f1_std: [0.0; 4],
            confusion: [[0; 4]; 4],
            zero_support_rows: [true; 4],
            fold_counts: vec![0],
        });
    }
    let preds = eval::predict_head(bundle, head, &covered, infer_batch)?;
    let truths: Vec<_> = covered.iter().map(|ex| ex.label).collect();
    let confusion = confusion_counts(&preds, &truths)?;
    let (_, zero_support_rows) = row_normalize(&confusion);
    let m = macro_f1(&preds, &truths)?;
    Ok(HeadReport {
        head,
        macro_f1_folds: vec![m],
        macro_f1_mean: m,
        macro_f1_std: 0.0,
        f1_mean: f1_per_class(&preds, &truths)?,
        f1_std: [0.0; 4],
        confusion,
        zero_support_rows,
        fold_counts: vec![covered.len()],
    })
}

fn write_report(ctx: &RunContext, report: &EvalReport) -> Result<(), CliError> {
    let json_path = ctx.dir().join("report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(report)?)
        .map_err(|e| CliError::Io { path: json_path.display().to_string(), source: e })?;
    let text_path = ctx.dir().join("report.txt");
    std::fs::write(&text_path, render_report(report))
        .map_err(|e| CliError::Io { path: text_path.display().to_string(), source: e })?;
    Ok(())
}

/// Scores a dataset. With a checkpoint, every labeled example is scored
/// once per head; without one, full cross-validation retrains per fold.
pub fn evaluate(
    ctx: &mut RunContext,
    config: &RunConfig,
    data: &Path,
    checkpoint: Option<&Path>,
) -> Result<serde_json::Value, CliError> {
    let store = DatasetStore::open(data)?;
    require_normalized(&store, "evaluate")?;
    let examples: Vec<_> = store.load_labeled()?.into_iter().map(|(_, ex)| ex).collect();
    if examples.is_empty() {
        return Err(CliError::Config(format!(
            "{} holds no labeled examples to score",
            data.display()
        )));
    }

    let report = match checkpoint {
        Some(path) => {
            let mut bundle = ModelBundle::load(&config.bundle, config.seed, path)?;
            ctx.log_event(
                "scoring",
                json!({ "examples": examples.len(), "checkpoint": path.display().to_string() }),
            );
            EvalReport {
                folds: 1,
                audio: score_head(&mut bundle, Head::Audio, &examples, config.infer_batch)?,
                face: score_head(&mut bundle, Head::Face, &examples, config.infer_batch)?,
                fused: score_head(&mut bundle, Head::Fused, &examples, config.infer_batch)?,
            }
        }
        None => {
            let pools = store.load_unlabeled()?;
            let UnlabeledPool::Audio(unlabeled_audio) = pools.audio else {
                return Err(CliError::Config("stored audio pool has the wrong modality".into()));
            };
            let UnlabeledPool::Face(unlabeled_face) = pools.face else {
                return Err(CliError::Config("stored face pool has the wrong modality".into()));
            };
            ctx.log_event(
                "cross_validation",
                json!({ "examples": examples.len(), "folds": config.train.folds }),
            );
            let opts = TrainOptions {
                config: config.train.clone(),
                optimizer: config.optimizer.clone(),
                policy: config.augment.policy()?,
                infer_batch: config.infer_batch,
            };
            eval::cross_validate(
                &examples,
                &unlabeled_audio,
                &unlabeled_face,
                &config.bundle,
                &opts,
                Some(ctx.dir()),
            )?
        }
    };
    if checkpoint.is_some() {
        write_report(ctx, &report)?;
    }
    println!("{}", render_report(&report));

    Ok(json!({
        "folds": report.folds,
        "audio_macro_f1": report.audio.macro_f1_mean,
        "face_macro_f1": report.face.macro_f1_mean,
        "fused_macro_f1": report.fused.macro_f1_mean,
        "report": ctx.dir().join("report.json").display().to_string(),
    }))
}

/// Re-renders the stored report of a finished evaluation run.
pub fn report(run_dir: &Path) -> Result<(), CliError> {
    let path = run_dir.join("report.json");
    require_inputs(&[("evaluation report", &path)])?;
    let body = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Io { path: path.display().to_string(), source: e })?;
    let report: EvalReport = serde_json::from_str(&body)?;
    println!("{}", render_report(&report));
    println!(
        "{}",
        json!({
            "event": "report",
            "folds": report.folds,
            "audio_macro_f1": report.audio.macro_f1_mean,
            "face_macro_f1": report.face.macro_f1_mean,
            "fused_macro_f1": report.fused.macro_f1_mean,
        })
    );
    Ok(())
}
