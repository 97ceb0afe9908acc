//! Combined semi-supervised training over the three-network bundle.
//!
//! Every step runs three networks forward and one backward pass over all
//! parameters jointly:
//!
//! - supervised terms: mean cross-entropy of each modality head on a weakly
//!   augmented labeled batch;
//! - consistency terms: hard pseudo-labels taken from weakly augmented
//!   unlabeled views (detached, confidence-masked at `tau`), scored with
//!   cross-entropy against strongly augmented views of the same items and
//!   divided by the full unlabeled batch size, accepted or not;
//! - fusion term: mean cross-entropy of the fusion head on a weakly
//!   augmented dual-modality batch.
//!
//! The terms combine as `total = b2 * (audio + face) + b3 * fused` with
//! `audio = supervised + b1 * consistency` (face likewise). From epoch
//! `distill_start` onward each raw unlabeled pool is replaced at the start
//! of every epoch by a distilled subset: the items whose unaugmented
//! inference confidence strictly exceeds the cubed threshold with a
//! non-neutral argmax. An empty distilled pool falls back to the raw pool
//! for that epoch with a logged warning.
//!
//! Batch pacing: one epoch is `floor(dual_count / batch_size)` steps; the
//! audio-labeled, face-labeled and unlabeled pools cycle independently
//! (reshuffling per pass) so smaller pools are revisited within an epoch.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView1, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{self, AugmentPolicy};
use crate::backbone::{one_hot_batch, Backbone, BackboneError, ModelBundle};
use crate::data::{
    BatchCycler, ClassLabel, DataError, DistilledPool, LabeledExample, LandmarkClip, LatentClip,
    Modality, TrainConfig, UnlabeledPool,
};
use crate::eval::{self, Head};
use crate::nn::graph::{Graph, Var};
use crate::nn::layers::{Bound, ParamStore, Phase};
use crate::nn::ops;
use crate::nn::optim::{CosineSchedule, SgdMomentum};
use crate::util::{mix_seed, rng_for, stream};

pub type Result<T> = std::result::Result<T, TrainerError>;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("non-finite loss or gradient; state rolled back to the pre-step snapshot")]
    NonFinite,
    #[error("epoch {epoch} step {step}: {source}")]
    AtStep {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<TrainerError>,
    },
    #[error("checkpoint restore: {0}")]
    Restore(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("metrics encoding: {0}")]
    Json(#[from] serde_json::Error),
}

/// Stochastic-gradient settings for the joint update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { learning_rate: 0.03, momentum: 0.9, weight_decay: 5e-4 }
    }
}

/// Everything a training run needs beyond the data and the bundle.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub config: TrainConfig,
    pub optimizer: OptimizerConfig,
    pub policy: AugmentPolicy,
    /// Batch size for inference passes (distillation, validation).
    pub infer_batch: usize,
}

impl TrainOptions {
    pub fn new(config: TrainConfig) -> Self {
        TrainOptions {
            config,
            optimizer: OptimizerConfig::default(),
            policy: AugmentPolicy::default(),
            infer_batch: 64,
        }
    }
}

/// Optional on-disk outputs of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainSinks {
    /// Per-epoch checkpoints `epoch_NNN.ckpt` plus `best.json`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Line-delimited JSON, one [`EpochMetrics`] record per epoch.
    pub metrics_path: Option<PathBuf>,
}

/// Training inputs: labeled examples, raw unlabeled pools, validation set.
///
/// The audio and face labeled subsets include single-modality examples;
/// the dual subset (both modalities present) paces the epoch and feeds the
/// fusion head. Normalized landmark clips are required throughout.
#[derive(Debug, Clone)]
pub struct TrainData {
    labeled: Vec<LabeledExample>,
    audio_idx: Vec<usize>,
    face_idx: Vec<usize>,
    dual_idx: Vec<usize>,
    unlabeled_audio: UnlabeledPool,
    unlabeled_face: UnlabeledPool,
    validation: Vec<LabeledExample>,
}

impl TrainData {
    pub fn new(
        labeled: Vec<LabeledExample>,
        unlabeled_audio: Vec<LatentClip>,
        unlabeled_face: Vec<LandmarkClip>,
        validation: Vec<LabeledExample>,
    ) -> Result<Self> {
        if labeled.is_empty() {
            return Err(TrainerError::Config("labeled set is empty".into()));
        }
        let mut audio_idx = Vec::new();
        let mut face_idx = Vec::new();
        let mut dual_idx = Vec::new();
        for (i, ex) in labeled.iter().enumerate() {
            if ex.audio.is_some() {
                audio_idx.push(i);
            }
            if ex.face.is_some() {
                face_idx.push(i);
            }
            if ex.has_both() {
                dual_idx.push(i);
            }
        }
        if dual_idx.is_empty() {
            return Err(TrainerError::Config(
                "need at least one dual-modality labeled example".into(),
            ));
        }
        for (what, clip) in labeled
            .iter()
            .chain(validation.iter())
            .filter_map(|ex| ex.face.as_ref().map(|c| ("labeled", c)))
            .chain(unlabeled_face.iter().map(|c| ("unlabeled", c)))
        {
            if !clip.is_normalized() {
                return Err(TrainerError::Config(format!(
                    "{what} landmark clip is not normalized"
                )));
            }
        }
        Ok(TrainData {
            labeled,
            audio_idx,
            face_idx,
            dual_idx,
            unlabeled_audio: UnlabeledPool::Audio(unlabeled_audio),
            unlabeled_face: UnlabeledPool::Face(unlabeled_face),
            validation,
        })
    }

    pub fn labeled(&self) -> &[LabeledExample] {
        &self.labeled
    }

    pub fn validation(&self) -> &[LabeledExample] {
        &self.validation
    }

    pub fn audio_count(&self) -> usize {
        self.audio_idx.len()
    }

    pub fn face_count(&self) -> usize {
        self.face_idx.len()
    }

    pub fn dual_count(&self) -> usize {
        self.dual_idx.len()
    }

    pub fn unlabeled_audio(&self) -> &UnlabeledPool {
        &self.unlabeled_audio
    }

    pub fn unlabeled_face(&self) -> &UnlabeledPool {
        &self.unlabeled_face
    }

    fn audio_clip(&self, pool_index: usize) -> &LatentClip {
        match &self.unlabeled_audio {
            UnlabeledPool::Audio(v) => &v[pool_index],
            UnlabeledPool::Face(_) => unreachable!("audio pool holds latent clips"),
        }
    }

    fn face_clip(&self, pool_index: usize) -> &LandmarkClip {
        match &self.unlabeled_face {
            UnlabeledPool::Face(v) => &v[pool_index],
            UnlabeledPool::Audio(_) => unreachable!("face pool holds landmark clips"),
        }
    }
}

/// Per-step loss components and pseudo-label acceptance rates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised_audio: f64,
    pub supervised_face: f64,
    pub unlabeled_audio: f64,
    pub unlabeled_face: f64,
    pub loss_audio: f64,
    pub loss_face: f64,
    pub loss_fused: f64,
    pub total: f64,
    pub acceptance_audio: f64,
    pub acceptance_face: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.supervised_audio,
            self.supervised_face,
            self.unlabeled_audio,
            self.unlabeled_face,
            self.loss_audio,
            self.loss_face,
            self.loss_fused,
            self.total,
            self.acceptance_audio,
            self.acceptance_face,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    fn accumulate(&mut self, other: &LossBreakdown) {
        self.supervised_audio += other.supervised_audio;
        self.supervised_face += other.supervised_face;
        self.unlabeled_audio += other.unlabeled_audio;
        self.unlabeled_face += other.unlabeled_face;
        self.loss_audio += other.loss_audio;
        self.loss_face += other.loss_face;
        self.loss_fused += other.loss_fused;
        self.total += other.total;
        self.acceptance_audio += other.acceptance_audio;
        self.acceptance_face += other.acceptance_face;
    }

    fn scaled(mut self, f: f64) -> LossBreakdown {
        self.supervised_audio *= f;
        self.supervised_face *= f;
        self.unlabeled_audio *= f;
        self.unlabeled_face *= f;
        self.loss_audio *= f;
        self.loss_face *= f;
        self.loss_fused *= f;
        self.total *= f;
        self.acceptance_audio *= f;
        self.acceptance_face *= f;
        self
    }
}

/// One unlabeled item's pseudo-labeling outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub item: usize,
    pub distribution: [f64; 4],
    pub hard_label: usize,
    pub accepted: bool,
    pub epoch: usize,
}

impl PseudoLabelRecord {
    /// `accepted` iff the peak probability reaches `tau`; the hard label is
    /// the argmax.
    pub fn from_distribution(item: usize, distribution: [f64; 4], tau: f64, epoch: usize) -> Self {
        let (hard_label, max) = argmax(ArrayView1::from(&distribution));
        PseudoLabelRecord { item, distribution, hard_label, accepted: max >= tau, epoch }
    }
}

/// Detached pseudo-labels for one unlabeled batch.
#[derive(Debug, Clone)]
pub struct PseudoLabelBatch {
    /// One-hot hard labels, row per item.
    pub targets: Array2<f64>,
    /// 1.0 where the peak confidence reaches the threshold, else 0.0.
    pub mask: Array1<f64>,
    /// Full class distributions from the weak view.
    pub distributions: Array2<f64>,
    /// Fraction of items passing the mask.
    pub acceptance: f64,
}

fn argmax(row: ArrayView1<f64>) -> (usize, f64) {
    let mut best = 0;
    let mut max = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > max {
            best = i;
            max = v;
        }
    }
    (best, max)
}

/// Computes hard pseudo-labels from weakly augmented views.
///
/// The forward pass uses batch statistics without updating running state
/// and records no gradients, so the targets are fully detached from the
/// parameters being trained.
pub fn pseudo_labels(
    bundle: &mut ModelBundle,
    modality: Modality,
    weak_views: &ArrayD<f64>,
    tau: f64,
) -> Result<PseudoLabelBatch> {
    let mut g = Graph::new(false);
    let bound = bundle.params.bind(&mut g);
    let x = g.leaf(weak_views.clone());
    let net = match modality {
        Modality::Audio => &mut bundle.audio,
        Modality::Face => &mut bundle.face,
    };
    let (_, logits) = net.forward(&mut g, &bound, x, Phase::Train { update_stats: false })?;
    let probs = ops::softmax_rows(&mut g, logits);
    let distributions: Array2<f64> = g
        .val(probs)
        .clone()
        .into_dimensionality()
        .expect("class distribution is 2-d");
    let n = distributions.nrows();
    let mut targets = Array2::<f64>::zeros((n, ClassLabel::COUNT));
    let mut mask = Array1::<f64>::zeros(n);
    let mut accepted = 0usize;
    for (i, row) in distributions.rows().into_iter().enumerate() {
        let (hard, max) = argmax(row);
        targets[[i, hard]] = 1.0;
        if max >= tau {
            mask[i] = 1.0;
            accepted += 1;
        }
    }
    Ok(PseudoLabelBatch {
        targets,
        mask,
        distributions,
        acceptance: accepted as f64 / n.max(1) as f64,
    })
}

/// Distillation predicate: peak strictly above `tau2` and non-neutral argmax.
pub fn distill_keep(distribution: ArrayView1<f64>, tau2: f64) -> bool {
    let (hard, max) = argmax(distribution);
    max > tau2 && hard < ClassLabel::NEUTRAL.index()
}

/// Outcome of filtering one raw unlabeled pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillOutcome {
    pub pool: DistilledPool,
    /// Raw pool size the filter ran over.
    pub total: usize,
    /// Argmax class of each kept item, aligned with `pool.items`.
    pub kept_classes: Vec<ClassLabel>,
    /// Argmax classes of the kept items (the neutral slot stays zero).
    pub class_counts: [usize; 4],
}

/// Filters a raw pool down to confidently non-neutral items.
///
/// Inference mode on unaugmented inputs with the threshold cubed;
/// an empty result is legal and left to the caller to handle.
pub fn distill_pool(
    bundle: &mut ModelBundle,
    pool: &UnlabeledPool,
    tau: f64,
    epoch: usize,
    infer_batch: usize,
) -> Result<DistillOutcome> {
    let tau2 = tau.powi(3);
    let batch = infer_batch.max(1);
    let mut items = Vec::new();
    let mut kept_classes = Vec::new();
    let mut class_counts = [0usize; 4];
    let mut offset = 0;
    let mut sift = |probs: Array2<f64>, items: &mut Vec<usize>| {
        for (i, row) in probs.rows().into_iter().enumerate() {
            if distill_keep(row, tau2) {
                items.push(offset + i);
                let class = argmax(row).0;
                kept_classes.push(ClassLabel::new(class).expect("argmax in range"));
                class_counts[class] += 1;
            }
        }
        offset += probs.nrows();
    };
    match pool {
        UnlabeledPool::Audio(clips) => {
            for chunk in clips.chunks(batch) {
                let refs: Vec<&LatentClip> = chunk.iter().collect();
                let probs = bundle.predict_audio(crate::data::latent_batch(&refs))?;
                sift(probs, &mut items);
            }
        }
        UnlabeledPool::Face(clips) => {
            for chunk in clips.chunks(batch) {
                let refs: Vec<&LandmarkClip> = chunk.iter().collect();
                let probs = bundle.predict_face(crate::data::landmark_batch(&refs))?;
                sift(probs, &mut items);
            }
        }
    }
    Ok(DistillOutcome {
        pool: DistilledPool { items, source_epoch: epoch },
        total: pool.len(),
        kept_classes,
        class_counts,
    })
}

/// One modality's training views for a single step.
#[derive(Debug, Clone)]
pub struct ModalityBatch {
    /// Weakly augmented labeled inputs, `[B, C, H, W]`.
    pub labeled_x: ArrayD<f64>,
    /// One-hot labels, `[B, 4]`.
    pub labeled_y: Array2<f64>,
    /// Weakly augmented unlabeled views (pseudo-label source); may be empty.
    pub unlabeled_weak: ArrayD<f64>,
    /// Strongly augmented views of the same items, row-aligned with weak.
    pub unlabeled_strong: ArrayD<f64>,
}

/// All five batches one combined step consumes.
#[derive(Debug, Clone)]
pub struct StepBatches {
    pub audio: ModalityBatch,
    pub face: ModalityBatch,
    /// Weakly augmented dual-modality inputs for the fusion head.
    pub fused_audio: ArrayD<f64>,
    pub fused_face: ArrayD<f64>,
    pub fused_y: Array2<f64>,
}

struct BuiltLosses {
    graph: Graph,
    bound: Bound,
    total: Var,
    breakdown: LossBreakdown,
}

fn modality_terms(
    g: &mut Graph,
    bound: &Bound,
    net: &mut Backbone,
    batch: &ModalityBatch,
    pseudo: Option<&PseudoLabelBatch>,
    beta1: f64,
    phase: Phase,
) -> Result<(Var, Option<Var>, Var)> {
    let x = g.leaf(batch.labeled_x.clone());
    let (_, logits) = net.forward(g, bound, x, phase)?;
    let supervised = ops::cross_entropy_mean(g, logits, &batch.labeled_y);
    let count = batch.unlabeled_strong.shape()[0];
    let pseudo = match pseudo {
        Some(p) if count > 0 => p,
        _ => return Ok((supervised, None, supervised)),
    };
    let xs = g.leaf(batch.unlabeled_strong.clone());
    let (_, strong_logits) = net.forward(g, bound, xs, phase)?;
    let unlabeled = ops::cross_entropy_masked_scaled(
        g,
        strong_logits,
        &pseudo.targets,
        &pseudo.mask,
        count as f64,
    );
    let weighted = ops::mul_scalar(g, unlabeled, beta1);
    let combined = ops::add(g, supervised, weighted);
    Ok((supervised, Some(unlabeled), combined))
}

fn build_losses(
    bundle: &mut ModelBundle,
    params: &ParamStore,
    batches: &StepBatches,
    pseudo_audio: Option<&PseudoLabelBatch>,
    pseudo_face: Option<&PseudoLabelBatch>,
    config: &TrainConfig,
    phase: Phase,
) -> Result<BuiltLosses> {
    let mut g = Graph::new(true);
    let bound = params.bind(&mut g);

    let (ls_a, lu_a, la) = modality_terms(
        &mut g,
        &bound,
        &mut bundle.audio,
        &batches.audio,
        pseudo_audio,
        config.beta1,
        phase,
    )?;
    let (ls_f, lu_f, lf) = modality_terms(
        &mut g,
        &bound,
        &mut bundle.face,
        &batches.face,
        pseudo_face,
        config.beta1,
        phase,
    )?;

    let xa = g.leaf(batches.fused_audio.clone());
    let xf = g.leaf(batches.fused_face.clone());
    let (logits_c, _) = bundle.fuse_forward(&mut g, &bound, xa, xf, phase)?;
    let lc = ops::cross_entropy_mean(&mut g, logits_c, &batches.fused_y);

    let modal = ops::add(&mut g, la, lf);
    let modal_w = ops::mul_scalar(&mut g, modal, config.beta2);
    let fused_w = ops::mul_scalar(&mut g, lc, config.beta3);
    let total = ops::add(&mut g, modal_w, fused_w);

    let scalar = |g: &Graph, v: Var| *g.val(v).iter().next().expect("scalar loss");
    let breakdown = LossBreakdown {
        supervised_audio: scalar(&g, ls_a),
        supervised_face: scalar(&g, ls_f),
        unlabeled_audio: lu_a.map_or(0.0, |v| scalar(&g, v)),
        unlabeled_face: lu_f.map_or(0.0, |v| scalar(&g, v)),
        loss_audio: scalar(&g, la),
        loss_face: scalar(&g, lf),
        loss_fused: scalar(&g, lc),
        total: scalar(&g, total),
        acceptance_audio: 0.0,
        acceptance_face: 0.0,
    };
    Ok(BuiltLosses { graph: g, bound, total, breakdown })
}

/// Runs one joint training step and updates every parameter.
///
/// Pseudo-labels are computed first from the weak unlabeled views, then the
/// supervised, consistency and fusion losses are assembled in one graph and
/// a single backward pass feeds the optimizer. A non-finite loss or
/// gradient restores the pre-step parameters and running statistics and
/// returns an error without touching the optimizer.
pub fn combined_step(
    bundle: &mut ModelBundle,
    batches: &StepBatches,
    config: &TrainConfig,
    opt: &mut SgdMomentum,
    lr: f64,
) -> Result<LossBreakdown> {
    let snapshot = bundle.state_map();
    let pseudo_audio = if batches.audio.unlabeled_strong.shape()[0] > 0 {
        Some(pseudo_labels(
            bundle,
            Modality::Audio,
            &batches.audio.unlabeled_weak,
            config.fixmatch_threshold,
        )?)
    } else {
        None
    };
    let pseudo_face = if batches.face.unlabeled_strong.shape()[0] > 0 {
        Some(pseudo_labels(
            bundle,
            Modality::Face,
            &batches.face.unlabeled_weak,
            config.fixmatch_threshold,
        )?)
    } else {
        None
    };

    let params = std::mem::take(&mut bundle.params);
    let built = build_losses(
        bundle,
        &params,
        batches,
        pseudo_audio.as_ref(),
        pseudo_face.as_ref(),
        config,
        Phase::Train { update_stats: true },
    );
    bundle.params = params;
    let mut built = built?;
    built.breakdown.acceptance_audio = pseudo_audio.as_ref().map_or(0.0, |p| p.acceptance);
    built.breakdown.acceptance_face = pseudo_face.as_ref().map_or(0.0, |p| p.acceptance);

    if !built.breakdown.is_finite() {
        bundle.restore_from(&snapshot)?;
        return Err(TrainerError::NonFinite);
    }
    let grads = built.graph.backward(built.total);
    let pgrads = built.bound.param_grads(&grads);
    let grads_finite = pgrads
        .iter()
        .flatten()
        .all(|ga| ga.iter().all(|v| v.is_finite()));
    if !grads_finite {
        bundle.restore_from(&snapshot)?;
        return Err(TrainerError::NonFinite);
    }
    opt.step(&mut bundle.params, &pgrads, lr);
    Ok(built.breakdown)
}

/// Per-epoch log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Mean loss components over the epoch's steps.
    pub loss: LossBreakdown,
    /// Distilled pool sizes; absent before the distillation start epoch or
    /// when the raw pool is empty.
    pub distilled_audio: Option<usize>,
    pub distilled_face: Option<usize>,
    /// Set when an empty distilled pool fell back to the raw pool.
    pub raw_fallback_audio: bool,
    pub raw_fallback_face: bool,
    /// Macro F1 per head on the validation set; absent without coverage.
    pub val_f1_audio: Option<f64>,
    pub val_f1_face: Option<f64>,
    pub val_f1_fused: Option<f64>,
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    /// Epoch whose fusion-head validation F1 was best; the bundle is left
    /// restored to it. Absent without validation data.
    pub best_epoch: Option<usize>,
    pub best_val_f1: Option<f64>,
}

#[derive(Serialize)]
struct BestPointer {
    epoch: usize,
    val_f1: f64,
}

struct EpochPlan {
    active_audio: Vec<usize>,
    active_face: Vec<usize>,
    cyc_audio: BatchCycler,
    cyc_face: BatchCycler,
    cyc_dual: BatchCycler,
    cyc_ua: Option<BatchCycler>,
    cyc_uf: Option<BatchCycler>,
    rng_ua: ChaCha8Rng,
    rng_uf: ChaCha8Rng,
}

impl EpochPlan {
    fn new(
        data: &TrainData,
        active_audio: Vec<usize>,
        active_face: Vec<usize>,
        config: &TrainConfig,
        epoch: usize,
    ) -> Self {
        let b = config.batch_size;
        let mu_b = config.unlabeled_factor * b;
        let seed = config.seed;
        let cycler = |n: usize, size: usize, sub: u64, tag: u64| {
            BatchCycler::new(n, size, mix_seed(seed, &[sub]), tag, epoch)
        };
        EpochPlan {
            cyc_audio: cycler(data.audio_count(), b, 0, stream::BATCH_LABELED),
            cyc_face: cycler(data.face_count(), b, 1, stream::BATCH_LABELED),
            cyc_dual: cycler(data.dual_count(), b, 2, stream::BATCH_LABELED),
            cyc_ua: (active_audio.len() >= mu_b)
                .then(|| cycler(active_audio.len(), mu_b, 3, stream::BATCH_UNLABELED)),
            cyc_uf: (active_face.len() >= mu_b)
                .then(|| cycler(active_face.len(), mu_b, 4, stream::BATCH_UNLABELED)),
            rng_ua: rng_for(seed, &[stream::BATCH_UNLABELED, 0, epoch as u64]),
            rng_uf: rng_for(seed, &[stream::BATCH_UNLABELED, 1, epoch as u64]),
            active_audio,
            active_face,
        }
    }

    /// Draws the pool indices for one `mu_b`-sized unlabeled batch: a
    /// shuffled pass when the pool is large enough, otherwise uniform
    /// draws with replacement.
    fn unlabeled_indices(
        cycler: &mut Option<BatchCycler>,
        active: &[usize],
        rng: &mut ChaCha8Rng,
        mu_b: usize,
    ) -> Vec<usize> {
        if let Some(c) = cycler {
            let batch = c.next_batch().expect("cycler exists only when pool >= batch");
            batch.into_iter().map(|p| active[p]).collect()
        } else if active.is_empty() {
            Vec::new()
        } else {
            (0..mu_b).map(|_| active[rng.random_range(0..active.len())]).collect()
        }
    }

    /// Assembles all five batches for one step.
    ///
    /// Augmentation draws follow a fixed order per step: labeled audio,
    /// labeled face, dual audio, dual face, unlabeled audio, unlabeled face
    /// from the weak stream; unlabeled audio then face from the strong one.
    fn next_batches(
        &mut self,
        data: &TrainData,
        opts: &TrainOptions,
        epoch: usize,
        step: usize,
    ) -> StepBatches {
        let config = &opts.config;
        let mu_b = config.unlabeled_factor * config.batch_size;
        let seed = config.seed;
        let mut weak = rng_for(seed, &[stream::AUGMENT_WEAK, epoch as u64, step as u64]);
        let mut strong = rng_for(seed, &[stream::AUGMENT_STRONG, epoch as u64, step as u64]);

        let audio_pick = self.cyc_audio.next_batch().expect("audio pool >= batch size");
        let labeled_audio: Vec<&LabeledExample> =
            audio_pick.iter().map(|&p| &data.labeled[data.audio_idx[p]]).collect();
        let audio_views: Vec<Array3<f64>> = labeled_audio
            .iter()
            .map(|ex| augment::weak_augment(&latent_f64(ex.audio.as_ref().unwrap()), &mut weak))
            .collect();
        let audio_labels: Vec<ClassLabel> = labeled_audio.iter().map(|ex| ex.label).collect();

        let face_pick = self.cyc_face.next_batch().expect("face pool >= batch size");
        let labeled_face: Vec<&LabeledExample> =
            face_pick.iter().map(|&p| &data.labeled[data.face_idx[p]]).collect();
        let face_views: Vec<Array3<f64>> = labeled_face
            .iter()
            .map(|ex| augment::weak_augment(&face_f64(ex.face.as_ref().unwrap()), &mut weak))
            .collect();
        let face_labels: Vec<ClassLabel> = labeled_face.iter().map(|ex| ex.label).collect();

        let dual_pick = self.cyc_dual.next_batch().expect("dual pool >= batch size");
        let dual: Vec<&LabeledExample> =
            dual_pick.iter().map(|&p| &data.labeled[data.dual_idx[p]]).collect();
        let dual_audio: Vec<Array3<f64>> = dual
            .iter()
            .map(|ex| augment::weak_augment(&latent_f64(ex.audio.as_ref().unwrap()), &mut weak))
            .collect();
        let dual_face: Vec<Array3<f64>> = dual
            .iter()
            .map(|ex| augment::weak_augment(&face_f64(ex.face.as_ref().unwrap()), &mut weak))
            .collect();
        let dual_labels: Vec<ClassLabel> = dual.iter().map(|ex| ex.label).collect();

        let ua_idx =
            Self::unlabeled_indices(&mut self.cyc_ua, &self.active_audio, &mut self.rng_ua, mu_b);
        let ua_clips: Vec<Array3<f64>> =
            ua_idx.iter().map(|&i| latent_f64(data.audio_clip(i))).collect();
        let ua_weak: Vec<Array3<f64>> =
            ua_clips.iter().map(|c| augment::weak_augment(c, &mut weak)).collect();

        let uf_idx =
            Self::unlabeled_indices(&mut self.cyc_uf, &self.active_face, &mut self.rng_uf, mu_b);
        let uf_clips: Vec<Array3<f64>> =
            uf_idx.iter().map(|&i| face_f64(data.face_clip(i))).collect();
        let uf_weak: Vec<Array3<f64>> =
            uf_clips.iter().map(|c| augment::weak_augment(c, &mut weak)).collect();

        let ua_strong: Vec<Array3<f64>> = ua_clips
            .iter()
            .map(|c| augment::strong_augment(c, augment::Modality::Latents, &opts.policy, &mut strong))
            .collect();
        let uf_strong: Vec<Array3<f64>> = uf_clips
            .iter()
            .map(|c| {
                augment::strong_augment(c, augment::Modality::Landmarks, &opts.policy, &mut strong)
            })
            .collect();

        StepBatches {
            audio: ModalityBatch {
                labeled_x: pack_audio(&audio_views),
                labeled_y: one_hot_batch(&audio_labels),
                unlabeled_weak: pack_audio(&ua_weak),
                unlabeled_strong: pack_audio(&ua_strong),
            },
            face: ModalityBatch {
                labeled_x: pack_face(&face_views),
                labeled_y: one_hot_batch(&face_labels),
                unlabeled_weak: pack_face(&uf_weak),
                unlabeled_strong: pack_face(&uf_strong),
            },
            fused_audio: pack_audio(&dual_audio),
            fused_face: pack_face(&dual_face),
            fused_y: one_hot_batch(&dual_labels),
        }
    }
}

fn latent_f64(clip: &LatentClip) -> Array3<f64> {
    clip.latents().mapv(f64::from)
}

fn face_f64(clip: &LandmarkClip) -> Array3<f64> {
    clip.frames().mapv(f64::from)
}

/// Packs `[T, V, 1]` latent views into an `[N, 1, T, V]` batch.
fn pack_audio(views: &[Array3<f64>]) -> ArrayD<f64> {
    let (t, v) = views.first().map_or((30, 50), |a| (a.dim().0, a.dim().1));
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[views.len(), 1, t, v]));
    for (i, view) in views.iter().enumerate() {
        for ti in 0..t {
            for vi in 0..v {
                out[[i, 0, ti, vi]] = view[(ti, vi, 0)];
            }
        }
    }
    out
}

/// Packs `[T, P, A]` landmark views into an `[N, A, T, P]` batch.
fn pack_face(views: &[Array3<f64>]) -> ArrayD<f64> {
    let (t, p, a) = views.first().map_or((30, 68, 3), |v| v.dim());
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[views.len(), a, t, p]));
    for (i, view) in views.iter().enumerate() {
        for ti in 0..t {
            for pi in 0..p {
                for ai in 0..a {
                    out[[i, ai, ti, pi]] = view[(ti, pi, ai)];
                }
            }
        }
    }
    out
}

fn validation_scores(
    bundle: &mut ModelBundle,
    data: &TrainData,
    infer_batch: usize,
) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    let eval_err = |e: eval::EvalError| TrainerError::Config(format!("validation: {e}"));
    let mut score = |head: Head| -> Result<Option<f64>> {
        let subset: Vec<&LabeledExample> = data
            .validation
            .iter()
            .filter(|ex| match head {
                Head::Audio => ex.audio.is_some(),
                Head::Face => ex.face.is_some(),
                Head::Fused => ex.has_both(),
            })
            .collect();
        if subset.is_empty() {
            return Ok(None);
        }
        let preds = eval::predict_head(bundle, head, &subset, infer_batch).map_err(eval_err)?;
        let truths: Vec<ClassLabel> = subset.iter().map(|ex| ex.label).collect();
        Ok(Some(eval::macro_f1(&preds, &truths).map_err(eval_err)?))
    };
    Ok((score(Head::Audio)?, score(Head::Face)?, score(Head::Fused)?))
}

fn append_jsonl(path: &Path, metrics: &EpochMetrics) -> Result<()> {
    let mut file = fs::OpenOptions::new().append(true).open(path)?;
    writeln!(file, "{}", serde_json::to_string(metrics)?)?;
    Ok(())
}

/// Runs the full training loop.
///
/// Epochs pace on the dual-modality labeled subset (`floor(n / B)` steps,
/// last partial batch dropped). From `distill_start` onward both unlabeled
/// pools are re-distilled at the start of every epoch. Checkpoints are
/// written per epoch when a directory is given; the bundle ends restored to
/// the epoch with the best fusion-head validation F1 (ties keep the earliest)
/// when validation data exists, else at the final epoch.
pub fn train(
    bundle: &mut ModelBundle,
    data: &TrainData,
    opts: &TrainOptions,
    sinks: &TrainSinks,
) -> Result<TrainOutcome> {
    let config = &opts.config;
    config.validate()?;
    let b = config.batch_size;
    for (name, n) in [
        ("audio", data.audio_count()),
        ("face", data.face_count()),
        ("dual", data.dual_count()),
    ] {
        if n < b {
            return Err(TrainerError::Config(format!(
                "labeled {name} subset ({n}) is smaller than the batch size ({b})"
            )));
        }
    }
    let steps_per_epoch = data.dual_count() / b;
    let schedule = CosineSchedule {
        base_lr: opts.optimizer.learning_rate,
        total_steps: (steps_per_epoch * config.total_epochs).max(1),
    };
    let mut opt =
        SgdMomentum::new(&bundle.params, opts.optimizer.momentum, opts.optimizer.weight_decay);

    if let Some(dir) = &sinks.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    if let Some(path) = &sinks.metrics_path {
        fs::File::create(path)?;
    }

    let mut history = Vec::with_capacity(config.total_epochs);
    let mut best: Option<(usize, f64, BTreeMap<String, ArrayD<f64>>)> = None;

    for epoch in 0..config.total_epochs {
        let mut distilled_audio = None;
        let mut distilled_face = None;
        let mut raw_fallback_audio = false;
        let mut raw_fallback_face = false;
        let mut active_audio: Vec<usize> = (0..data.unlabeled_audio.len()).collect();
        let mut active_face: Vec<usize> = (0..data.unlabeled_face.len()).collect();
        if epoch >= config.distill_start {
            if !data.unlabeled_audio.is_empty() {
                let out = distill_pool(
                    bundle,
                    &data.unlabeled_audio,
                    config.fixmatch_threshold,
                    epoch,
                    opts.infer_batch,
                )?;
                distilled_audio = Some(out.pool.items.len());
                if out.pool.items.is_empty() {
                    raw_fallback_audio = true;
                    eprintln!(
                        "warning: distilled audio pool empty at epoch {epoch}; using the raw pool"
                    );
                } else {
                    active_audio = out.pool.items;
                }
            }
            if !data.unlabeled_face.is_empty() {
                let out = distill_pool(
                    bundle,
                    &data.unlabeled_face,
                    config.fixmatch_threshold,
                    epoch,
                    opts.infer_batch,
                )?;
                distilled_face = Some(out.pool.items.len());
                if out.pool.items.is_empty() {
                    raw_fallback_face = true;
                    eprintln!(
                        "warning: distilled face pool empty at epoch {epoch}; using the raw pool"
                    );
                } else {
                    active_face = out.pool.items;
                }
            }
        }

        let mut plan = EpochPlan::new(data, active_audio, active_face, config, epoch);
        let epoch_lr = schedule.lr_at(epoch * steps_per_epoch);
        let mut sum = LossBreakdown::default();
        for step in 0..steps_per_epoch {
            let lr = schedule.lr_at(epoch * steps_per_epoch + step);
            let batches = plan.next_batches(data, opts, epoch, step);
            let breakdown =
                combined_step(bundle, &batches, config, &mut opt, lr).map_err(|source| {
                    TrainerError::AtStep { epoch, step, source: Box::new(source) }
                })?;
            sum.accumulate(&breakdown);
        }

        let (val_f1_audio, val_f1_face, val_f1_fused) =
            validation_scores(bundle, data, opts.infer_batch)?;

        if let Some(dir) = &sinks.checkpoint_dir {
            bundle.save(&dir.join(format!("epoch_{epoch:03}.ckpt")))?;
        }
        if let Some(f1) = val_f1_fused {
            if best.as_ref().is_none_or(|(_, best_f1, _)| f1 > *best_f1) {
                best = Some((epoch, f1, bundle.state_map()));
            }
        }

        let metrics = EpochMetrics {
            epoch,
            steps: steps_per_epoch,
            learning_rate: epoch_lr,
            loss: sum.scaled(1.0 / steps_per_epoch.max(1) as f64),
            distilled_audio,
            distilled_face,
            raw_fallback_audio,
            raw_fallback_face,
            val_f1_audio,
            val_f1_face,
            val_f1_fused,
        };
        if let Some(path) = &sinks.metrics_path {
            append_jsonl(path, &metrics)?;
        }
        history.push(metrics);
    }

    let (best_epoch, best_val_f1) = match best {
        Some((epoch, f1, state)) => {
            bundle
                .restore_from(&state)
                .map_err(|e| TrainerError::Restore(e.to_string()))?;
            if let Some(dir) = &sinks.checkpoint_dir {
                let pointer = BestPointer { epoch, val_f1: f1 };
                fs::write(dir.join("best.json"), serde_json::to_string_pretty(&pointer)?)?;
            }
            (Some(epoch), Some(f1))
        }
        None => (None, None),
    };

    Ok(TrainOutcome { history, best_epoch, best_val_f1 })
}
