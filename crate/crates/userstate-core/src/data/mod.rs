//! Shared data model: labels, clips, pools, configuration and storage.

mod batch;
mod clipio;
mod folds;
mod manifest;
mod store;

pub use batch::{landmark_batch, latent_batch, BatchCycler};
pub use clipio::{clip_from_bytes, clip_to_bytes, read_clip_f32, write_clip_f32};
pub use folds::{make_folds, make_index_folds, make_stratified_folds, Fold};
pub use manifest::{
    load_manifest, save_manifest, SegmentEntry, SegmentManifest, MANIFEST_FORMAT_VERSION,
};
pub use store::{DatasetMeta, DatasetStore, StoredUnlabeled};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("class index {0} out of range (4 classes)")]
    LabelOutOfRange(usize),
    #[error("unknown class name {0:?}")]
    UnknownClassName(String),
    #[error("clip shape {got:?} does not match required {want:?}")]
    ClipShape { want: Vec<usize>, got: Vec<usize> },
    #[error("normalized clip has coordinate {value} outside [0,1] at {index:?}")]
    OutOfRange { value: f32, index: Vec<usize> },
    #[error("labeled example must carry at least one modality")]
    NoModality,
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("invariant violation in field {field}: {msg}")]
    Invariant { field: &'static str, msg: String },
    #[error("manifest has {got} labeled entries, need at least {need}")]
    TooFewEntries { need: usize, got: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("clip file {path}: {msg}")]
    ClipFormat { path: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// Four-way user-state label. Neutral is always index 3 so that
/// "argmax < 3" means "not neutral" in the distillation rule.
///
/// Serializes as the bare class index; deserialization rejects indices
/// past 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct ClassLabel(u8);

impl TryFrom<usize> for ClassLabel {
    type Error = DataError;

    fn try_from(index: usize) -> Result<Self> {
        ClassLabel::new(index)
    }
}

impl From<ClassLabel> for usize {
    fn from(label: ClassLabel) -> usize {
        label.index()
    }
}

impl ClassLabel {
    pub const COUNT: usize = 4;
    pub const AGREEMENT: ClassLabel = ClassLabel(0);
    pub const DISAGREEMENT: ClassLabel = ClassLabel(1);
    pub const CONFUSION: ClassLabel = ClassLabel(2);
    pub const NEUTRAL: ClassLabel = ClassLabel(3);

    pub fn new(index: usize) -> Result<Self> {
        if index < Self::COUNT {
            Ok(ClassLabel(index as u8))
        } else {
            Err(DataError::LabelOutOfRange(index))
        }
    }

    pub fn index(&self) -> usize {
        self.0 as usize
    }

    pub fn is_neutral(&self) -> bool {
        self.0 == 3
    }

    pub fn name(&self) -> &'static str {
        ["agreement", "disagreement", "confusion", "neutral"][self.index()]
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "agreement" => Ok(Self::AGREEMENT),
            "disagreement" => Ok(Self::DISAGREEMENT),
            "confusion" => Ok(Self::CONFUSION),
            "neutral" => Ok(Self::NEUTRAL),
            other => Err(DataError::UnknownClassName(other.to_string())),
        }
    }

    pub fn all() -> [ClassLabel; 4] {
        [Self::AGREEMENT, Self::DISAGREEMENT, Self::CONFUSION, Self::NEUTRAL]
    }

    pub fn one_hot(&self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }
}

/// 30 frames of 68 3D landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkClip {
    frames: Array3<f32>,
    normalized: bool,
}

pub const CLIP_FRAMES: usize = 30;
pub const LANDMARK_POINTS: usize = 68;
pub const LANDMARK_AXES: usize = 3;
pub const LATENT_WIDTH: usize = 50;

impl LandmarkClip {
    pub fn new(frames: Array3<f32>, normalized: bool) -> Result<Self> {
        let want = [CLIP_FRAMES, LANDMARK_POINTS, LANDMARK_AXES];
        if frames.shape() != want {
            return Err(DataError::ClipShape { want: want.to_vec(), got: frames.shape().to_vec() });
        }
        if normalized {
            for (idx, &v) in frames.indexed_iter() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(DataError::OutOfRange {
                        value: v,
                        index: vec![idx.0, idx.1, idx.2],
                    });
                }
            }
        }
        Ok(LandmarkClip { frames, normalized })
    }

    pub fn frames(&self) -> &Array3<f32> {
        &self.frames
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// 30 time steps of 50 quantized latent values.
///
/// Codebook membership cannot be checked without the codec at hand; use
/// `codec::check_membership` where the invariant matters.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    latents: Array3<f32>,
}

impl LatentClip {
    pub fn new(latents: Array3<f32>) -> Result<Self> {
        let want = [CLIP_FRAMES, LATENT_WIDTH, 1];
        if latents.shape() != want {
            return Err(DataError::ClipShape { want: want.to_vec(), got: latents.shape().to_vec() });
        }
        Ok(LatentClip { latents })
    }

    pub fn latents(&self) -> &Array3<f32> {
        &self.latents
    }
}

/// A labeled example carrying one or both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub audio: Option<LatentClip>,
    pub face: Option<LandmarkClip>,
    pub label: ClassLabel,
}

impl LabeledExample {
    pub fn new(
        audio: Option<LatentClip>,
        face: Option<LandmarkClip>,
        label: ClassLabel,
    ) -> Result<Self> {
        if audio.is_none() && face.is_none() {
            return Err(DataError::NoModality);
        }
        Ok(LabeledExample { audio, face, label })
    }

    pub fn has_both(&self) -> bool {
        self.audio.is_some() && self.face.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Face,
}

/// Homogeneous unlabeled clip pool, one modality per pool.
#[derive(Debug, Clone, PartialEq)]
pub enum UnlabeledPool {
    Audio(Vec<LatentClip>),
    Face(Vec<LandmarkClip>),
}

impl UnlabeledPool {
    pub fn modality(&self) -> Modality {
        match self {
            UnlabeledPool::Audio(_) => Modality::Audio,
            UnlabeledPool::Face(_) => Modality::Face,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            UnlabeledPool::Audio(v) => v.len(),
            UnlabeledPool::Face(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Indices into an [`UnlabeledPool`] that passed the distillation filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistilledPool {
    pub items: Vec<usize>,
    pub source_epoch: usize,
}

/// Training hyperparameters.
///
/// `tau2` is always derived as the cube of `fixmatch_threshold`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub unlabeled_factor: usize,
    pub distill_start: usize,
    pub total_epochs: usize,
    pub fixmatch_threshold: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub folds: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn tau2(&self) -> f64 {
        self.fixmatch_threshold.powi(3)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &'static str, msg: String| Err(DataError::Invariant { field, msg });
        if self.batch_size < 1 {
            return fail("batch_size", "must be >= 1".into());
        }
        if self.unlabeled_factor < 1 {
            return fail("unlabeled_factor", "must be >= 1".into());
        }
        if !(self.fixmatch_threshold > 0.0 && self.fixmatch_threshold < 1.0) {
            return fail(
                "fixmatch_threshold",
                format!("must lie in (0,1), got {}", self.fixmatch_threshold),
            );
        }
        if self.distill_start > self.total_epochs {
            return fail(
                "distill_start",
                format!("{} exceeds total_epochs {}", self.distill_start, self.total_epochs),
            );
        }
        if self.beta1 < 0.0 || self.beta2 < 0.0 || self.beta3 < 0.0 {
            return fail("beta", "loss weights must be nonnegative".into());
        }
        if self.folds < 2 {
            return fail("folds", "need at least 2 folds".into());
        }
        Ok(())
    }

    /// Hyperparameters used for the full-scale reference runs.
    pub fn paper_preset(seed: u64) -> Self {
        TrainConfig {
            batch_size: 12,
            unlabeled_factor: 10,
            distill_start: 10,
            total_epochs: 500,
            fixmatch_threshold: 0.95,
            beta1: 1.0,
            beta2: 3.0,
            beta3: 2.0,
            folds: 5,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn labels_are_four_way_with_neutral_last() {
        assert!(ClassLabel::new(4).is_err());
        assert_eq!(ClassLabel::NEUTRAL.index(), 3);
        assert!(ClassLabel::NEUTRAL.is_neutral());
        for c in ClassLabel::all() {
            assert_eq!(ClassLabel::from_name(c.name()).unwrap(), c);
            let oh = c.one_hot();
            assert_eq!(oh.iter().sum::<f64>(), 1.0);
            assert_eq!(oh.iter().cloned().fold(0.0, f64::max), 1.0);
        }
    }

    #[test]
    fn normalized_landmark_clip_rejects_out_of_range() {
        let mut a = Array3::<f32>::zeros((30, 68, 3));
        a[(0, 0, 0)] = 1.5;
        assert!(LandmarkClip::new(a.clone(), true).is_err());
        a[(0, 0, 0)] = 0.5;
        assert!(LandmarkClip::new(a, true).is_ok());
    }

    #[test]
    fn clip_shapes_are_enforced() {
        assert!(LandmarkClip::new(Array3::zeros((29, 68, 3)), false).is_err());
        assert!(LatentClip::new(Array3::zeros((30, 50, 2))).is_err());
        assert!(LatentClip::new(Array3::zeros((30, 50, 1))).is_ok());
    }

    #[test]
    fn labeled_example_needs_a_modality() {
        assert!(LabeledExample::new(None, None, ClassLabel::AGREEMENT).is_err());
    }

    #[test]
    fn tau2_is_cube_of_tau() {
        let mut cfg = TrainConfig::paper_preset(0);
        cfg.fixmatch_threshold = 0.95;
        assert_eq!(cfg.tau2(), 0.95f64.powi(3));
        cfg.fixmatch_threshold = 0.5;
        assert_eq!(cfg.tau2(), 0.125);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = TrainConfig::paper_preset(0);
        cfg.fixmatch_threshold = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::paper_preset(0);
        cfg.distill_start = 501;
        assert!(cfg.validate().is_err());
    }
}
