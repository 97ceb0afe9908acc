//! Synthetic multimodal clips with controllable difficulty.
//!
//! Generators for desk-scale verification: every item is built from a
//! class-specific motion or band template plus a noise knob, so ground
//! truth is known by construction and a nearest-template oracle can
//! recover it. Face clips are emitted raw: the class signal is a head
//! motion (nod, shake, tilt-and-freeze, idle) layered under a random
//! static pose, scale and translation, which [`crate::face::normalize_clip`]
//! must remove. Audio latents are class band patterns snapped to a uniform
//! grid so they look like quantized codec output. Unlabeled pools keep
//! their true labels hidden on the side for post-hoc audits only.
//!
//! Generation is deterministic per spec: item `i` of substream `s` draws
//! from `rng_for(seed, &[stream::SYNTH, s, i])`, so datasets can be
//! regenerated or extended without disturbing existing items.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioChunk, SAMPLE_RATE};
use crate::data::{
    ClassLabel, DataError, LabeledExample, LandmarkClip, LatentClip, UnlabeledPool, CLIP_FRAMES,
    LANDMARK_AXES, LANDMARK_POINTS, LATENT_WIDTH,
};
use crate::face::{self, RotationMode, RotationState};
use crate::util::{rng_for, stream};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("generator configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Face(#[from] face::FaceError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Whether audio is emitted as ready-made latent clips or as raw waveforms
/// that still have to pass through the MFCC frontend and codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AudioMode {
    #[default]
    Latent,
    Waveform,
}

/// Knobs for the synthetic generators.
///
/// `noise` scales every perturbation at once: landmark jitter, head-angle
/// jitter, motion amplitude/phase variation and latent noise. At zero the
/// items are exact class templates (modulo the nuisance transforms that
/// normalization removes). `label_noise` is the probability that an
/// emitted label is flipped to a different uniformly drawn class; the true
/// label is kept alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub noise: f64,
    pub label_noise: f64,
    pub priors: [f64; 4],
    pub audio_mode: AudioMode,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            noise: 0.2,
            label_noise: 0.0,
            priors: [0.25; 4],
            audio_mode: AudioMode::Latent,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn new(seed: u64) -> Self {
        GeneratorSpec { seed, ..GeneratorSpec::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(SynthError::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(SynthError::Config(format!(
                "label_noise must lie in [0,1], got {}",
                self.label_noise
            )));
        }
        if self.priors.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(SynthError::Config(format!(
                "priors must be non-negative, got {:?}",
                self.priors
            )));
        }
        let sum: f64 = self.priors.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SynthError::Config(format!("priors must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// One generated labeled item. `raw_face` is the un-normalized pipeline
/// input that produced `face`; `true_label` is the class before label
/// noise. In waveform mode `waveform` holds one second of audio and the
/// synthetic `latent` is a stand-in that a trained codec would replace.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub latent: LatentClip,
    pub raw_face: LandmarkClip,
    pub face: LandmarkClip,
    pub waveform: Option<Vec<f64>>,
    pub label: ClassLabel,
    pub true_label: ClassLabel,
}

/// Unlabeled pools with hidden ground truth.
///
/// The two pools are drawn independently (disjoint substreams), mirroring
/// corpora where audio and face clips come from different recordings. The
/// hidden labels exist for audits only and must never feed training.
/// `raw_faces` holds the un-normalized inputs behind the `face` pool for
/// callers that persist pipeline input.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPools {
    pub audio: UnlabeledPool,
    pub face: UnlabeledPool,
    pub raw_faces: Vec<LandmarkClip>,
    pub hidden_audio: Vec<ClassLabel>,
    pub hidden_face: Vec<ClassLabel>,
    pub audio_waveforms: Option<Vec<Vec<f64>>>,
}

const MOTION_AMPLITUDE: f64 = 0.35;
const MOTION_CYCLES: f64 = 2.0;
const NUISANCE_ANGLE: f64 = 0.25;
const NUISANCE_SCALE: (f64, f64) = (0.7, 1.3);
const NUISANCE_SHIFT: f64 = 0.4;
const LANDMARK_JITTER: f64 = 0.15;
const ANGLE_JITTER: f64 = 0.14;
const LATENT_PEAK: f64 = 0.8;
const LATENT_NOISE: f64 = 0.6;
const GRID_HALF_STEPS: f64 = 32.0;
const LATENT_CENTERS: [f64; 3] = [8.0, 25.0, 42.0];
const LATENT_BAND_WIDTH: f64 = 4.0;
const NEUTRAL_LEVEL: f64 = 0.08;
const WAVE_BANDS: [(f64, f64); 4] =
    [(300.0, 800.0), (900.0, 1800.0), (2000.0, 3500.0), (150.0, 4000.0)];
const WAVE_TONES: usize = 6;

/// Head pose trajectory for one class at clip fraction `u` in [0,1).
///
/// Agreement nods (pitch oscillation), disagreement shakes (yaw
/// oscillation), confusion tilts and freezes (roll ramp that saturates at
/// `ramp`), neutral idles.
fn motion_state(class: ClassLabel, u: f64, amp: f64, phase: f64, ramp: f64) -> RotationState {
    let wave = (std::f64::consts::TAU * MOTION_CYCLES * u + phase).sin();
    let mut state = RotationState { roll: 0.0, pitch: 0.0, yaw: 0.0 };
    match class {
        ClassLabel::AGREEMENT => state.pitch = amp * wave,
        ClassLabel::DISAGREEMENT => state.yaw = amp * wave,
        ClassLabel::CONFUSION => state.roll = amp * (u / ramp).min(1.0),
        _ => {}
    }
    state
}

fn latent_pattern(class: ClassLabel, t: usize, d: usize) -> f64 {
    if class == ClassLabel::NEUTRAL {
        return NEUTRAL_LEVEL;
    }
    let center = LATENT_CENTERS[class.index()];
    let gap = d as f64 - center;
    let band = (-gap * gap / (2.0 * LATENT_BAND_WIDTH * LATENT_BAND_WIDTH)).exp();
    let u = t as f64 / CLIP_FRAMES as f64;
    let temporal = 0.6 + 0.4 * (std::f64::consts::TAU * MOTION_CYCLES * u).sin();
    LATENT_PEAK * band * temporal
}

/// Snaps a value onto the uniform grid `{k/32 : |k| <= 32}`, the synthetic
/// stand-in for codec quantization levels.
fn snap(v: f64) -> f32 {
    ((v.clamp(-1.0, 1.0) * GRID_HALF_STEPS).round() / GRID_HALF_STEPS) as f32
}

/// The noise-free latent clip for a class, already snapped to the grid.
pub fn latent_template(class: ClassLabel) -> Array3<f32> {
    Array3::from_shape_fn((CLIP_FRAMES, LATENT_WIDTH, 1), |(t, d, _)| {
        snap(latent_pattern(class, t, d))
    })
}

fn synth_latent_clip(class: ClassLabel, noise: f64, rng: &mut ChaCha8Rng) -> LatentClip {
    let dist = Normal::new(0.0, LATENT_NOISE * noise).expect("finite std dev");
    let values = Array3::from_shape_fn((CLIP_FRAMES, LATENT_WIDTH, 1), |(t, d, _)| {
        snap(latent_pattern(class, t, d) + dist.sample(rng))
    });
    LatentClip::new(values).expect("template shape is valid")
}

fn raw_face_frames(
    class: ClassLabel,
    amp: f64,
    phase: f64,
    ramp: f64,
    mut perturb: impl FnMut(usize, &Array2<f64>) -> Array2<f64>,
) -> Array3<f32> {
    let template = face::canonical_template();
    let mut frames = Array3::<f32>::zeros((CLIP_FRAMES, LANDMARK_POINTS, LANDMARK_AXES));
    for t in 0..CLIP_FRAMES {
        let u = t as f64 / CLIP_FRAMES as f64;
        let state = motion_state(class, u, amp, phase, ramp);
        let moved = face::rotate_points(&template, &face::pose_rotation(&state));
        let placed = perturb(t, &moved);
        for i in 0..LANDMARK_POINTS {
            for a in 0..LANDMARK_AXES {
                frames[(t, i, a)] = placed[(i, a)] as f32;
            }
        }
    }
    frames
}

/// The noise-free normalized face clip for a class: the motion template
/// without any nuisance transform, passed through the same normalization
/// as generated items.
pub fn face_reference(class: ClassLabel) -> Result<LandmarkClip> {
    let frames = raw_face_frames(class, MOTION_AMPLITUDE, 0.0, 0.5, |_, p| p.clone());
    let raw = LandmarkClip::new(frames, false)?;
    Ok(face::normalize_clip(&raw, RotationMode::RelativeToFirst)?)
}

fn synth_face_clip(class: ClassLabel, noise: f64, rng: &mut ChaCha8Rng) -> Result<LandmarkClip> {
    let amp = MOTION_AMPLITUDE * (1.0 + 0.5 * noise * rng.random_range(-1.0..=1.0));
    let phase = 0.8 * noise * rng.random_range(-1.0..=1.0);
    let ramp = (0.5 + 0.2 * noise * rng.random_range(-1.0..=1.0)).clamp(0.15, 0.85);

    let nuisance = RotationState {
        roll: rng.random_range(-NUISANCE_ANGLE..=NUISANCE_ANGLE),
        pitch: rng.random_range(-NUISANCE_ANGLE..=NUISANCE_ANGLE),
        yaw: rng.random_range(-NUISANCE_ANGLE..=NUISANCE_ANGLE),
    };
    let pose = face::pose_rotation(&nuisance);
    let scale = rng.random_range(NUISANCE_SCALE.0..=NUISANCE_SCALE.1);
    let shift = [
        rng.random_range(-NUISANCE_SHIFT..=NUISANCE_SHIFT),
        rng.random_range(-NUISANCE_SHIFT..=NUISANCE_SHIFT),
        rng.random_range(-NUISANCE_SHIFT..=NUISANCE_SHIFT),
    ];
    let angle_dist = Normal::new(0.0, ANGLE_JITTER * noise).expect("finite std dev");
    let point_dist = Normal::new(0.0, LANDMARK_JITTER * noise).expect("finite std dev");

    let template = face::canonical_template();
    let mut frames = Array3::<f32>::zeros((CLIP_FRAMES, LANDMARK_POINTS, LANDMARK_AXES));
    for t in 0..CLIP_FRAMES {
        let u = t as f64 / CLIP_FRAMES as f64;
        let mut state = motion_state(class, u, amp, phase, ramp);
        state.roll += angle_dist.sample(rng);
        state.pitch += angle_dist.sample(rng);
        state.yaw += angle_dist.sample(rng);
        let moved = face::rotate_points(&template, &face::pose_rotation(&state));
        let placed = face::rotate_points(&moved, &pose);
        for i in 0..LANDMARK_POINTS {
            for a in 0..LANDMARK_AXES {
                let v = scale * placed[(i, a)] + shift[a] + point_dist.sample(rng);
                frames[(t, i, a)] = v as f32;
            }
        }
    }
    Ok(LandmarkClip::new(frames, false)?)
}

fn synth_waveform(class: ClassLabel, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (lo, hi) = WAVE_BANDS[class.index()];
    let amp = if class == ClassLabel::NEUTRAL { 0.05 } else { 0.15 };
    let tones: Vec<(f64, f64)> = (0..WAVE_TONES)
        .map(|_| (rng.random_range(lo..hi), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let dist = Normal::new(0.0, 0.05 * noise).expect("finite std dev");
    let n = SAMPLE_RATE as usize;
    let mut samples = Vec::with_capacity(n);
    for s in 0..n {
        let t = s as f64 / SAMPLE_RATE as f64;
        let tone: f64 =
            tones.iter().map(|(f, p)| amp * (std::f64::consts::TAU * f * t + p).sin()).sum();
        samples.push(tone + dist.sample(rng));
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.95 {
        let k = 0.95 / peak;
        for v in &mut samples {
            *v *= k;
        }
    }
    samples
}

fn sample_class(priors: &[f64; 4], rng: &mut ChaCha8Rng) -> ClassLabel {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in priors.iter().enumerate() {
        acc += p;
        if r < acc {
            return ClassLabel::new(i).expect("class index in range");
        }
    }
    ClassLabel::NEUTRAL
}

fn flip_label(class: ClassLabel, label_noise: f64, rng: &mut ChaCha8Rng) -> ClassLabel {
    if label_noise > 0.0 && rng.random::<f64>() < label_noise {
        let step = rng.random_range(1..ClassLabel::COUNT);
        ClassLabel::new((class.index() + step) % ClassLabel::COUNT).expect("class index in range")
    } else {
        class
    }
}

fn unlabeled_class(rare_rate: f64, rng: &mut ChaCha8Rng) -> ClassLabel {
    if rare_rate > 0.0 && rng.random::<f64>() < rare_rate {
        ClassLabel::new(rng.random_range(0..3)).expect("class index in range")
    } else {
        ClassLabel::NEUTRAL
    }
}

/// Generates `n` labeled items with classes drawn from the spec priors.
pub fn generate_labeled(n: usize, spec: &GeneratorSpec) -> Result<Vec<SynthItem>> {
    spec.validate()?;
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng_for(spec.seed, &[stream::SYNTH, 0, i as u64]);
        let class = sample_class(&spec.priors, &mut rng);
        let raw_face = synth_face_clip(class, spec.noise, &mut rng)?;
        let face = face::normalize_clip(&raw_face, RotationMode::RelativeToFirst)?;
        let latent = synth_latent_clip(class, spec.noise, &mut rng);
        let waveform = match spec.audio_mode {
            AudioMode::Latent => None,
            AudioMode::Waveform => Some(synth_waveform(class, spec.noise, &mut rng)),
        };
        let label = flip_label(class, spec.label_noise, &mut rng);
        items.push(SynthItem { latent, raw_face, face, waveform, label, true_label: class });
    }
    Ok(items)
}

/// Generates two independent unlabeled pools of `n` items each. Classes
/// are neutral except with probability `rare_rate`, in which case one of
/// the three non-neutral classes is drawn uniformly.
pub fn generate_unlabeled(n: usize, spec: &GeneratorSpec, rare_rate: f64) -> Result<SynthPools> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&rare_rate) {
        return Err(SynthError::Config(format!("rare_rate must lie in [0,1], got {rare_rate}")));
    }

    let mut latents = Vec::with_capacity(n);
    let mut hidden_audio = Vec::with_capacity(n);
    let mut waveforms =
        (spec.audio_mode == AudioMode::Waveform).then(|| Vec::with_capacity(n));
    for i in 0..n {
        let mut rng = rng_for(spec.seed, &[stream::SYNTH, 1, i as u64]);
        let class = unlabeled_class(rare_rate, &mut rng);
        latents.push(synth_latent_clip(class, spec.noise, &mut rng));
        if let Some(w) = waveforms.as_mut() {
            w.push(synth_waveform(class, spec.noise, &mut rng));
        }
        hidden_audio.push(class);
    }

    let mut faces = Vec::with_capacity(n);
    let mut raw_faces = Vec::with_capacity(n);
    let mut hidden_face = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng_for(spec.seed, &[stream::SYNTH, 2, i as u64]);
        let class = unlabeled_class(rare_rate, &mut rng);
        let raw = synth_face_clip(class, spec.noise, &mut rng)?;
        faces.push(face::normalize_clip(&raw, RotationMode::RelativeToFirst)?);
        raw_faces.push(raw);
        hidden_face.push(class);
    }

    Ok(SynthPools {
        audio: UnlabeledPool::Audio(latents),
        face: UnlabeledPool::Face(faces),
        raw_faces,
        hidden_audio,
        hidden_face,
        audio_waveforms: waveforms,
    })
}

/// Band-limited tone chunks for codec pretraining, cycling through the
/// class frequency bands.
pub fn generate_codec_corpus(n_chunks: usize, seed: u64) -> Result<Vec<AudioChunk>> {
    let mut chunks = Vec::with_capacity(n_chunks);
    for i in 0..n_chunks {
        let mut rng = rng_for(seed, &[stream::SYNTH, 3, i as u64]);
        let (lo, hi) = WAVE_BANDS[i % WAVE_BANDS.len()];
        let tones: Vec<(f64, f64, f64)> = (0..8)
            .map(|_| {
                (
                    rng.random_range(lo..hi),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.02..0.12),
                )
            })
            .collect();
        let mut samples = Vec::with_capacity(crate::audio::CHUNK_SAMPLES);
        for s in 0..crate::audio::CHUNK_SAMPLES {
            let t = s as f64 / SAMPLE_RATE as f64;
            let v: f64 = tones
                .iter()
                .map(|(f, p, a)| a * (std::f64::consts::TAU * f * t + p).sin())
                .sum();
            samples.push(v);
        }
        chunks.push(AudioChunk::new(samples)?);
    }
    Ok(chunks)
}

/// Converts generated items into training examples carrying both
/// modalities (the normalized face, not the raw one).
pub fn labeled_examples(items: &[SynthItem]) -> Vec<LabeledExample> {
    items
        .iter()
        .map(|item| LabeledExample {
            audio: Some(item.latent.clone()),
            face: Some(item.face.clone()),
            label: item.label,
        })
        .collect()
}

/// Classifies clips by L2 distance to the class templates. On noise-free
/// input this recovers the generating class exactly.
pub struct NearestTemplateOracle {
    latent_refs: [Array3<f32>; 4],
    face_refs: [LandmarkClip; 4],
}

impl NearestTemplateOracle {
    pub fn new() -> Result<Self> {
        let latent_refs = ClassLabel::all().map(latent_template);
        let mut face_refs = Vec::with_capacity(ClassLabel::COUNT);
        for class in ClassLabel::all() {
            face_refs.push(face_reference(class)?);
        }
        let face_refs: [LandmarkClip; 4] = face_refs.try_into().expect("four classes");
        Ok(NearestTemplateOracle { latent_refs, face_refs })
    }

    pub fn classify_latent(&self, clip: &LatentClip) -> ClassLabel {
        let best = self
            .latent_refs
            .iter()
            .map(|r| distance(clip.latents().as_slice().unwrap(), r.as_slice().unwrap()))
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("four references")
            .0;
        ClassLabel::new(best).expect("class index in range")
    }

    /// Expects a normalized clip; raw clips must run through
    /// [`crate::face::normalize_clip`] first.
    pub fn classify_face(&self, clip: &LandmarkClip) -> Result<ClassLabel> {
        if !clip.is_normalized() {
            return Err(SynthError::Config(
                "face oracle expects a normalized clip".to_string(),
            ));
        }
        let best = self
            .face_refs
            .iter()
            .map(|r| {
                distance(
                    clip.frames().as_slice().unwrap(),
                    r.frames().as_slice().unwrap(),
                )
            })
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("four references")
            .0;
        Ok(ClassLabel::new(best).expect("class index in range"))
    }
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

/// Fraction of distilled items whose hidden true label matches the
/// pseudo-label the model assigned. `kept` indexes into `hidden`; `pseudo`
/// is aligned with `kept`.
pub fn distillation_audit(
    hidden: &[ClassLabel],
    kept: &[usize],
    pseudo: &[ClassLabel],
) -> Result<f64> {
    if kept.len() != pseudo.len() {
        return Err(SynthError::Config(format!(
            "kept indices ({}) and pseudo-labels ({}) must align",
            kept.len(),
            pseudo.len()
        )));
    }
    if kept.is_empty() {
        return Err(SynthError::Config("audit of an empty distilled pool".to_string()));
    }
    let mut hits = 0usize;
    for (&idx, &label) in kept.iter().zip(pseudo) {
        let truth = hidden.get(idx).ok_or_else(|| {
            SynthError::Config(format!("kept index {idx} outside pool of {}", hidden.len()))
        })?;
        if *truth == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / kept.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face::alignment_residual;

    fn spec(seed: u64, noise: f64) -> GeneratorSpec {
        GeneratorSpec { noise, ..GeneratorSpec::new(seed) }
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut bad = spec(1, -0.1);
        assert!(matches!(generate_labeled(1, &bad), Err(SynthError::Config(_))));
        bad = spec(1, 0.1);
        bad.label_noise = 1.5;
        assert!(matches!(generate_labeled(1, &bad), Err(SynthError::Config(_))));
        bad = spec(1, 0.1);
        bad.priors = [0.5, 0.5, 0.5, -0.5];
        assert!(matches!(generate_labeled(1, &bad), Err(SynthError::Config(_))));
        bad = spec(1, 0.1);
        bad.priors = [0.5, 0.1, 0.1, 0.1];
        assert!(matches!(generate_labeled(1, &bad), Err(SynthError::Config(_))));
        let ok = spec(1, 0.1);
        assert!(matches!(
            generate_unlabeled(1, &ok, 1.2),
            Err(SynthError::Config(_))
        ));
    }

    #[test]
    fn regenerates_identically_for_a_seed() {
        let s = spec(42, 0.3);
        let a = generate_labeled(6, &s).unwrap();
        let b = generate_labeled(6, &s).unwrap();
        assert_eq!(a, b);
        let pa = generate_unlabeled(5, &s, 0.4).unwrap();
        let pb = generate_unlabeled(5, &s, 0.4).unwrap();
        assert_eq!(pa, pb);

        let other = generate_labeled(6, &spec(43, 0.3)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn noise_free_items_match_templates_exactly() {
        let oracle = NearestTemplateOracle::new().unwrap();
        let items = generate_labeled(40, &spec(7, 0.0)).unwrap();
        let mut seen = [0usize; 4];
        for item in &items {
            assert_eq!(item.label, item.true_label);
            assert_eq!(oracle.classify_latent(&item.latent), item.true_label);
            assert_eq!(oracle.classify_face(&item.face).unwrap(), item.true_label);
            seen[item.true_label.index()] += 1;
        }
        assert!(seen.iter().all(|&c| c > 0), "all classes drawn: {seen:?}");
    }

    #[test]
    fn label_noise_flips_the_expected_fraction() {
        let clean = generate_labeled(50, &spec(3, 0.1)).unwrap();
        assert!(clean.iter().all(|i| i.label == i.true_label));

        let mut noisy_spec = spec(3, 0.1);
        noisy_spec.label_noise = 0.3;
        let noisy = generate_labeled(2000, &noisy_spec).unwrap();
        let flipped = noisy.iter().filter(|i| i.label != i.true_label).count();
        // Binomial(2000, 0.3): mean 600, 3 sigma ~ 61.5.
        assert!((538..=662).contains(&flipped), "flipped {flipped} of 2000");
    }

    #[test]
    fn priors_shape_the_class_distribution() {
        let mut skewed = spec(9, 0.05);
        skewed.priors = [0.7, 0.1, 0.1, 0.1];
        let items = generate_labeled(4000, &skewed).unwrap();
        let mut counts = [0usize; 4];
        for item in &items {
            counts[item.true_label.index()] += 1;
        }
        // 3 sigma for p=0.7 is ~87, for p=0.1 is ~57.
        assert!((2713..=2887).contains(&counts[0]), "counts {counts:?}");
        for &c in &counts[1..] {
            assert!((343..=457).contains(&c), "counts {counts:?}");
        }
    }

    #[test]
    fn rare_rate_controls_non_neutral_fraction() {
        let s = spec(11, 0.1);
        let all_neutral = generate_unlabeled(200, &s, 0.0).unwrap();
        assert!(all_neutral.hidden_audio.iter().all(ClassLabel::is_neutral));
        assert!(all_neutral.hidden_face.iter().all(ClassLabel::is_neutral));

        let pools = generate_unlabeled(5000, &s, 0.1).unwrap();
        assert_eq!(pools.audio.len(), 5000);
        assert_eq!(pools.face.len(), 5000);
        for hidden in [&pools.hidden_audio, &pools.hidden_face] {
            let rare: Vec<&ClassLabel> = hidden.iter().filter(|c| !c.is_neutral()).collect();
            // Binomial(5000, 0.1): mean 500, 3 sigma ~ 64.
            assert!((436..=564).contains(&rare.len()), "rare {}", rare.len());
            let mut per_class = [0usize; 3];
            for c in &rare {
                per_class[c.index()] += 1;
            }
            // Each non-neutral class holds about a third of the rare draws.
            for &c in &per_class {
                let frac = c as f64 / rare.len() as f64;
                assert!((frac - 1.0 / 3.0).abs() < 0.07, "per_class {per_class:?}");
            }
        }
    }

    #[test]
    fn raw_clips_normalize_to_the_emitted_face() {
        let items = generate_labeled(8, &spec(21, 0.25)).unwrap();
        for item in &items {
            assert!(!item.raw_face.is_normalized());
            assert!(item.face.is_normalized());
            let redone =
                face::normalize_clip(&item.raw_face, RotationMode::RelativeToFirst).unwrap();
            assert_eq!(redone, item.face);
        }

        let pools = generate_unlabeled(3, &spec(21, 0.25), 0.5).unwrap();
        let UnlabeledPool::Face(faces) = &pools.face else { panic!("expected face pool") };
        assert_eq!(pools.raw_faces.len(), faces.len());
        for (raw, norm) in pools.raw_faces.iter().zip(faces) {
            assert!(!raw.is_normalized());
            let redone = face::normalize_clip(raw, RotationMode::RelativeToFirst).unwrap();
            assert_eq!(&redone, norm);
        }
    }

    #[test]
    fn normalization_removes_the_nuisance_pose() {
        // The first frame of a normalized clip is back in canonical
        // orientation regardless of the random static pose.
        let items = generate_labeled(5, &spec(33, 0.0)).unwrap();
        for item in &items {
            let f = item.face.frames();
            let mut pts = Array2::<f64>::zeros((LANDMARK_POINTS, LANDMARK_AXES));
            for i in 0..LANDMARK_POINTS {
                for a in 0..LANDMARK_AXES {
                    pts[(i, a)] = f[(0, i, a)] as f64;
                }
            }
            // Min-max scaling is per-axis affine, which preserves the
            // equality predicates the residual checks.
            assert!(alignment_residual(&pts) < 1e-5);
        }
    }

    #[test]
    fn oracle_accuracy_degrades_with_noise() {
        let oracle = NearestTemplateOracle::new().unwrap();
        let mut accs = Vec::new();
        for noise in [0.0, 1.5, 4.0] {
            let items = generate_labeled(100, &spec(1234, noise)).unwrap();
            let mut hits = 0usize;
            for item in &items {
                if oracle.classify_latent(&item.latent) == item.true_label {
                    hits += 1;
                }
                if oracle.classify_face(&item.face).unwrap() == item.true_label {
                    hits += 1;
                }
            }
            accs.push(hits as f64 / 200.0);
        }
        assert_eq!(accs[0], 1.0, "noise-free accuracy {accs:?}");
        assert!(accs[0] >= accs[1] && accs[1] >= accs[2], "accuracies {accs:?}");
        assert!(accs[2] < 0.95, "high noise should hurt: {accs:?}");
    }

    #[test]
    fn latents_stay_on_the_quantization_grid() {
        let items = generate_labeled(10, &spec(5, 2.0)).unwrap();
        for item in &items {
            for &v in item.latent.latents() {
                let scaled = v as f64 * GRID_HALF_STEPS;
                assert_eq!(scaled, scaled.round(), "off-grid value {v}");
                assert!(v.abs() <= 1.0);
            }
        }
    }

    #[test]
    fn audit_scores_hand_case() {
        let a = ClassLabel::AGREEMENT;
        let d = ClassLabel::DISAGREEMENT;
        let c = ClassLabel::CONFUSION;
        let n = ClassLabel::NEUTRAL;
        let hidden = [a, d, c, n, a];
        let frac = distillation_audit(&hidden, &[0, 2, 4], &[a, c, d]).unwrap();
        assert!((frac - 2.0 / 3.0).abs() < 1e-12);

        assert!(distillation_audit(&hidden, &[0, 1], &[a]).is_err());
        assert!(distillation_audit(&hidden, &[], &[]).is_err());
        assert!(distillation_audit(&hidden, &[9], &[a]).is_err());
    }

    #[test]
    fn waveform_mode_emits_chunkable_audio() {
        let latent_only = generate_labeled(2, &spec(2, 0.1)).unwrap();
        assert!(latent_only.iter().all(|i| i.waveform.is_none()));

        let mut wf = spec(2, 0.1);
        wf.audio_mode = AudioMode::Waveform;
        let items = generate_labeled(3, &wf).unwrap();
        for item in &items {
            let wave = item.waveform.as_ref().unwrap();
            assert_eq!(wave.len(), SAMPLE_RATE as usize);
            assert!(wave.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
            let chunks = crate::audio::chunk_stream(wave, SAMPLE_RATE).unwrap();
            assert_eq!(chunks.len(), CLIP_FRAMES);
        }

        let pools = generate_unlabeled(2, &wf, 0.5).unwrap();
        let waves = pools.audio_waveforms.unwrap();
        assert_eq!(waves.len(), 2);
        assert!(generate_unlabeled(2, &spec(2, 0.1), 0.5)
            .unwrap()
            .audio_waveforms
            .is_none());
    }

    #[test]
    fn codec_corpus_yields_valid_chunks() {
        let a = generate_codec_corpus(8, 77).unwrap();
        let b = generate_codec_corpus(8, 77).unwrap();
        assert_eq!(a.len(), 8);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.samples(), y.samples());
            assert!(x.samples().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        }
    }

    #[test]
    fn labeled_examples_carry_both_modalities() {
        let items = generate_labeled(4, &spec(6, 0.2)).unwrap();
        let examples = labeled_examples(&items);
        assert_eq!(examples.len(), 4);
        for (ex, item) in examples.iter().zip(&items) {
            assert!(ex.has_both());
            assert_eq!(ex.label, item.label);
            assert_eq!(ex.face.as_ref().unwrap(), &item.face);
        }
    }
}
