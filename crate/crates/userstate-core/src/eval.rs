//! Metrics and cross-validated evaluation for the three classifier heads.
//!
//! Scoring is per-class F1 over the four states plus its unweighted mean
//! (macro F1), reported per head as a mean and sample standard deviation
//! across validation folds, with a pooled confusion matrix. Cross-validation
//! retrains the full bundle from scratch on each fold's training split and
//! scores the held-out split once at the end, so no fold ever influences
//! the model it is scored with.

use std::fmt::Write as FmtWrite;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneError, BundleConfig, ModelBundle};
use crate::data::{
    self, make_index_folds, ClassLabel, DataError, LabeledExample, LandmarkClip, LatentClip,
};
use crate::trainer::{self, TrainData, TrainOptions, TrainSinks, TrainerError};
use crate::util::mix_seed;

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction/truth length mismatch: {preds} vs {truths}")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("cannot score an empty example set")]
    Empty,
    #[error("example {index} lacks the {head} head's input modality")]
    MissingModality { head: &'static str, index: usize },
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report encoding: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which classifier output to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Audio,
    Face,
    Fused,
}

impl Head {
    pub fn name(&self) -> &'static str {
        match self {
            Head::Audio => "audio",
            Head::Face => "face",
            Head::Fused => "fused",
        }
    }

    /// Whether an example carries the inputs this head needs.
    pub fn covers(&self, ex: &LabeledExample) -> bool {
        match self {
            Head::Audio => ex.audio.is_some(),
            Head::Face => ex.face.is_some(),
            Head::Fused => ex.has_both(),
        }
    }
}

/// Per-class F1 over the four states.
///
/// `f1 = 2tp / (2tp + fp + fn)`, defined as zero when the denominator is
/// zero (a class absent from both predictions and truths scores zero).
pub fn f1_per_class(preds: &[ClassLabel], truths: &[ClassLabel]) -> Result<[f64; 4]> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), truths: truths.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut tp = [0u64; 4];
    let mut fp = [0u64; 4];
    let mut fneg = [0u64; 4];
    for (p, t) in preds.iter().zip(truths) {
        if p == t {
            tp[p.index()] += 1;
        } else {
            fp[p.index()] += 1;
            fneg[t.index()] += 1;
        }
    }
    let mut f1 = [0.0; 4];
    for c in 0..4 {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        if denom > 0 {
            f1[c] = 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok(f1)
}

/// Unweighted mean of the per-class F1 scores.
pub fn macro_f1(preds: &[ClassLabel], truths: &[ClassLabel]) -> Result<f64> {
    Ok(f1_per_class(preds, truths)?.iter().sum::<f64>() / 4.0)
}

/// Confusion counts indexed `[truth][prediction]`.
pub fn confusion_counts(preds: &[ClassLabel], truths: &[ClassLabel]) -> Result<[[u64; 4]; 4]> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), truths: truths.len() });
    }
    let mut m = [[0u64; 4]; 4];
    for (p, t) in preds.iter().zip(truths) {
        m[t.index()][p.index()] += 1;
    }
    Ok(m)
}

/// Normalizes each row to sum to one; rows without support stay zero and
/// are flagged.
pub fn row_normalize(counts: &[[u64; 4]; 4]) -> ([[f64; 4]; 4], [bool; 4]) {
    let mut out = [[0.0; 4]; 4];
    let mut zero_support = [false; 4];
    for (t, row) in counts.iter().enumerate() {
        let total: u64 = row.iter().sum();
        if total == 0 {
            zero_support[t] = true;
            continue;
        }
        for (p, &c) in row.iter().enumerate() {
            out[t][p] = c as f64 / total as f64;
        }
    }
    (out, zero_support)
}

fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut max = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > max {
            best = i;
            max = v;
        }
    }
    best
}

/// Inference-mode hard predictions for one head over a set of examples.
///
/// Every example must carry the modalities the head consumes. Inputs are
/// unaugmented; batching only bounds memory and never changes the result.
pub fn predict_head(
    bundle: &mut ModelBundle,
    head: Head,
    examples: &[&LabeledExample],
    infer_batch: usize,
) -> Result<Vec<ClassLabel>> {
    if examples.is_empty() {
        return Err(EvalError::Empty);
    }
    for (index, ex) in examples.iter().enumerate() {
        if !head.covers(ex) {
            return Err(EvalError::MissingModality { head: head.name(), index });
        }
    }
    let batch = infer_batch.max(1);
    let mut preds = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch) {
        let probs = match head {
            Head::Audio => {
                let clips: Vec<&LatentClip> =
                    chunk.iter().map(|ex| ex.audio.as_ref().unwrap()).collect();
                bundle.predict_audio(data::latent_batch(&clips))?
            }
            Head::Face => {
                let clips: Vec<&LandmarkClip> =
                    chunk.iter().map(|ex| ex.face.as_ref().unwrap()).collect();
                bundle.predict_face(data::landmark_batch(&clips))?
            }
            Head::Fused => {
                let audio: Vec<&LatentClip> =
                    chunk.iter().map(|ex| ex.audio.as_ref().unwrap()).collect();
                let face: Vec<&LandmarkClip> =
                    chunk.iter().map(|ex| ex.face.as_ref().unwrap()).collect();
                bundle.predict_fused(data::latent_batch(&audio), data::landmark_batch(&face))?
            }
        };
        for row in probs.rows() {
            preds.push(ClassLabel::new(argmax_row(row))?);
        }
    }
    Ok(preds)
}

/// Sample mean and standard deviation (n − 1); std is zero for n ≤ 1.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() <= 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Cross-fold scores for one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub head: Head,
    /// Macro F1 per scored fold, fold order.
    pub macro_f1_folds: Vec<f64>,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    /// Per-class F1 means across scored folds.
    pub f1_mean: [f64; 4],
    pub f1_std: [f64; 4],
    /// Confusion counts pooled over every fold's held-out predictions.
    pub confusion: [[u64; 4]; 4],
    /// True where a class never occurred in the pooled held-out truths.
    pub zero_support_rows: [bool; 4],
    /// Scored examples per fold (zero when a fold had no coverage).
    pub fold_counts: Vec<usize>,
}

impl HeadReport {
    fn from_folds(head: Head, folds: &[FoldScore], confusion: [[u64; 4]; 4]) -> Self {
        let macro_f1_folds: Vec<f64> = folds.iter().map(|f| f.macro_f1).collect();
        let (macro_f1_mean, macro_f1_std) = mean_std(&macro_f1_folds);
        let mut f1_mean = [0.0; 4];
        let mut f1_std = [0.0; 4];
        for c in 0..4 {
            let per_class: Vec<f64> = folds.iter().map(|f| f.f1[c]).collect();
            (f1_mean[c], f1_std[c]) = mean_std(&per_class);
        }
        let (_, zero_support_rows) = row_normalize(&confusion);
        HeadReport {
            head,
            macro_f1_folds,
            macro_f1_mean,
            macro_f1_std,
            f1_mean,
            f1_std,
            confusion,
            zero_support_rows,
            fold_counts: Vec::new(),
        }
    }
}

struct FoldScore {
    macro_f1: f64,
    f1: [f64; 4],
}

/// Full cross-validation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub folds: usize,
    pub audio: HeadReport,
    pub face: HeadReport,
    pub fused: HeadReport,
}

impl EvalReport {
    pub fn head(&self, head: Head) -> &HeadReport {
        match head {
            Head::Audio => &self.audio,
            Head::Face => &self.face,
            Head::Fused => &self.fused,
        }
    }
}

const CLASS_NAMES: [&str; 4] = ["agreement", "disagreement", "confusion", "neutral"];

/// Renders a report as a fixed-width text table with row-normalized
/// confusion matrices.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "cross-validation over {} folds", report.folds);
    let _ = writeln!(
        out,
        "{:<6} {:>8} {:>8}  {:>10} {:>13} {:>10} {:>8}",
        "head", "macroF1", "std", CLASS_NAMES[0], CLASS_NAMES[1], CLASS_NAMES[2], CLASS_NAMES[3]
    );
    for head in [Head::Audio, Head::Face, Head::Fused] {
        let h = report.head(head);
        let _ = writeln!(
            out,
            "{:<6} {:>8.4} {:>8.4}  {:>10.4} {:>13.4} {:>10.4} {:>8.4}",
            h.head.name(),
            h.macro_f1_mean,
            h.macro_f1_std,
            h.f1_mean[0],
            h.f1_mean[1],
            h.f1_mean[2],
            h.f1_mean[3]
        );
    }
    for head in [Head::Audio, Head::Face, Head::Fused] {
        let h = report.head(head);
        let (rows, zero) = row_normalize(&h.confusion);
        let _ = writeln!(out, "\n{} confusion (rows: truth, normalized):", h.head.name());
        for (t, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>7.3}")).collect();
            let tag = if zero[t] { "  (no support)" } else { "" };
            let _ = writeln!(out, "  {:<13} {}{}", CLASS_NAMES[t], cells.join(" "), tag);
        }
    }
    out
}

/// Retrains and scores the bundle across stratification-free index folds.
///
/// Each fold seeds its own model initialization, batching and augmentation
/// streams from the base seed, trains on the fold's training split with the
/// given unlabeled pools and scores each head once on the held-out split
/// (restricted to examples carrying that head's modalities). With an
/// artifacts directory, each fold writes `fold_NN/metrics.jsonl` and
/// `fold_NN/final.ckpt`.
pub fn cross_validate(
    examples: &[LabeledExample],
    unlabeled_audio: &[LatentClip],
    unlabeled_face: &[LandmarkClip],
    bundle_config: &BundleConfig,
    opts: &TrainOptions,
    artifacts_dir: Option<&Path>,
) -> Result<EvalReport> {
    let folds = make_index_folds(examples.len(), opts.config.folds, opts.config.seed)?;
    let mut scores: [Vec<FoldScore>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut counts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut confusion = [[[0u64; 4]; 4]; 3];

    for (fi, fold) in folds.iter().enumerate() {
        let fold_seed = mix_seed(opts.config.seed, &[fi as u64]);
        let mut fold_opts = opts.clone();
        fold_opts.config.seed = fold_seed;

        let train_set: Vec<LabeledExample> =
            fold.train.iter().map(|&i| examples[i].clone()).collect();
        let data = TrainData::new(
            train_set,
            unlabeled_audio.to_vec(),
            unlabeled_face.to_vec(),
            Vec::new(),
        )?;

        let fold_dir: Option<PathBuf> = match artifacts_dir {
            Some(dir) => {
                let d = dir.join(format!("fold_{fi:02}"));
                fs::create_dir_all(&d)?;
                Some(d)
            }
            None => None,
        };
        let sinks = TrainSinks {
            checkpoint_dir: None,
            metrics_path: fold_dir.as_ref().map(|d| d.join("metrics.jsonl")),
        };

        let mut bundle = ModelBundle::new(bundle_config, fold_seed)?;
        trainer::train(&mut bundle, &data, &fold_opts, &sinks)?;
        if let Some(d) = &fold_dir {
            bundle.save(&d.join("final.ckpt"))?;
        }

        for (hi, head) in [Head::Audio, Head::Face, Head::Fused].into_iter().enumerate() {
            let subset: Vec<&LabeledExample> = fold
                .val
                .iter()
                .map(|&i| &examples[i])
                .filter(|ex| head.covers(ex))
                .collect();
            counts[hi].push(subset.len());
            if subset.is_empty() {
                continue;
            }
            let preds = predict_head(&mut bundle, head, &subset, opts.infer_batch)?;
            let truths: Vec<ClassLabel> = subset.iter().map(|ex| ex.label).collect();
            let f1 = f1_per_class(&preds, &truths)?;
            scores[hi].push(FoldScore { macro_f1: f1.iter().sum::<f64>() / 4.0, f1 });
            let m = confusion_counts(&preds, &truths)?;
            for t in 0..4 {
                for p in 0..4 {
                    confusion[hi][t][p] += m[t][p];
                }
            }
        }
    }

    let mut reports = [Head::Audio, Head::Face, Head::Fused]
        .into_iter()
        .enumerate()
        .map(|(hi, head)| {
            let mut r = HeadReport::from_folds(head, &scores[hi], confusion[hi]);
            r.fold_counts = counts[hi].clone();
            r
        });
    let report = EvalReport {
        folds: folds.len(),
        audio: reports.next().unwrap(),
        face: reports.next().unwrap(),
        fused: reports.next().unwrap(),
    };
    if let Some(dir) = artifacts_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        fs::write(dir.join("report.txt"), render_report(&report))?;
    }
    Ok(report)
}
