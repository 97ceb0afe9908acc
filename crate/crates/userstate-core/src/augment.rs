//! Weak and strong augmentation for landmark and latent clips.
//!
//! Weak augmentation translates a clip by independent integer shifts on its
//! two leading axes (time and space), each bounded by 15% of the axis length
//! rounded toward zero, with vacated cells zero-filled. No flip is applied.
//!
//! Strong augmentation draws `n` transforms uniformly from a reduced
//! randomized-augmentation op set and applies them in order at a shared
//! magnitude level. Shear and rotation are excluded by construction; policies
//! naming them are rejected. Because the inputs are not natural images, the
//! color-space ops of the original policy are mapped one-to-one onto generic
//! elementwise transforms over a per-modality value range:
//!
//! | op                   | analog of  | effect                                       |
//! |----------------------|------------|----------------------------------------------|
//! | `translate_x`        | TranslateX | integer shift on axis 1, zero fill           |
//! | `translate_y`        | TranslateY | integer shift on axis 0, zero fill           |
//! | `cutout`             | Cutout     | rectangular zero mask on axes 0 and 1        |
//! | `value_scale`        | Contrast   | scale around the range midpoint              |
//! | `value_shift`        | Brightness | constant offset                              |
//! | `sharpen_1d`         | Sharpness  | blend with a 1-2-1 smoothing along time      |
//! | `solarize_threshold` | Solarize   | invert values at or above a threshold        |
//! | `posterize_quantize` | Posterize  | quantize to a reduced number of levels       |
//! | `autocontrast_rescale` | AutoContrast | affine remap of observed min/max to range |
//! | `equalize_histogram` | Equalize   | 256-bin empirical CDF remap onto the range   |
//! | `identity`           | Identity   | no-op                                        |
//!
//! Landmark clips use the fixed range `[0, 1]` and are clamped back into it
//! after augmentation; latent clips use their observed min/max and are left
//! unclamped. All ops preserve the input shape, and identical
//! `(input, rng state, policy)` triples produce identical outputs.

use ndarray::Array3;
use rand::Rng;
use thiserror::Error;

/// Fraction of an axis length a weak translation may cover.
pub const WEAK_TRANSLATE_FRACTION: f64 = 0.15;

/// Magnitude levels span `0..=MAX_MAGNITUDE`; strength is `m / MAX_MAGNITUDE`.
pub const MAX_MAGNITUDE: u32 = 30;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("op {0:?} is excluded from the policy")]
    ExcludedOp(String),
    #[error("unknown op {0:?}")]
    UnknownOp(String),
    #[error("invalid policy: {0}")]
    Config(String),
}

/// Which kind of clip an augmentation is applied to.
///
/// Selects the value range used by the elementwise ops and whether the
/// output is clamped back into that range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    /// Normalized landmark clips; range `[0, 1]`, output clamped.
    Landmarks,
    /// Codec latent clips; range taken from the input, output unclamped.
    Latents,
}

/// One transform in the strong-augmentation op set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    TranslateX,
    TranslateY,
    Cutout,
    ValueScale,
    ValueShift,
    Sharpen1d,
    SolarizeThreshold,
    PosterizeQuantize,
    AutocontrastRescale,
    EqualizeHistogram,
    Identity,
}

const EXCLUDED_OPS: [&str; 3] = ["shear_x", "shear_y", "rotate"];

const ALL_OPS: [OpKind; 11] = [
    OpKind::TranslateX,
    OpKind::TranslateY,
    OpKind::Cutout,
    OpKind::ValueScale,
    OpKind::ValueShift,
    OpKind::Sharpen1d,
    OpKind::SolarizeThreshold,
    OpKind::PosterizeQuantize,
    OpKind::AutocontrastRescale,
    OpKind::EqualizeHistogram,
    OpKind::Identity,
];

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::TranslateX => "translate_x",
            OpKind::TranslateY => "translate_y",
            OpKind::Cutout => "cutout",
            OpKind::ValueScale => "value_scale",
            OpKind::ValueShift => "value_shift",
            OpKind::Sharpen1d => "sharpen_1d",
            OpKind::SolarizeThreshold => "solarize_threshold",
            OpKind::PosterizeQuantize => "posterize_quantize",
            OpKind::AutocontrastRescale => "autocontrast_rescale",
            OpKind::EqualizeHistogram => "equalize_histogram",
            OpKind::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Result<OpKind, AugmentError> {
        if EXCLUDED_OPS.contains(&name) {
            return Err(AugmentError::ExcludedOp(name.to_string()));
        }
        ALL_OPS
            .iter()
            .copied()
            .find(|op| op.name() == name)
            .ok_or_else(|| AugmentError::UnknownOp(name.to_string()))
    }
}

/// Strong-augmentation policy: an op set, ops per sample and a magnitude.
#[derive(Debug, Clone)]
pub struct AugmentPolicy {
    ops: Vec<OpKind>,
    ops_per_sample: usize,
    magnitude: u32,
}

impl Default for AugmentPolicy {
    /// The full reduced op set with two ops per sample at magnitude 10.
    fn default() -> Self {
        AugmentPolicy {
            ops: ALL_OPS.to_vec(),
            ops_per_sample: 2,
            magnitude: 10,
        }
    }
}

impl AugmentPolicy {
    /// Builds a policy from op names.
    ///
    /// Rejects shear and rotation names, unknown names, duplicates, an empty
    /// op set and magnitudes above [`MAX_MAGNITUDE`].
    pub fn from_names(
        names: &[&str],
        ops_per_sample: usize,
        magnitude: u32,
    ) -> Result<AugmentPolicy, AugmentError> {
        if names.is_empty() {
            return Err(AugmentError::Config("op set is empty".into()));
        }
        if magnitude > MAX_MAGNITUDE {
            return Err(AugmentError::Config(format!(
                "magnitude {magnitude} exceeds {MAX_MAGNITUDE}"
            )));
        }
        let mut ops = Vec::with_capacity(names.len());
        for name in names {
            let op = OpKind::from_name(name)?;
            if ops.contains(&op) {
                return Err(AugmentError::Config(format!("duplicate op {name:?}")));
            }
            ops.push(op);
        }
        Ok(AugmentPolicy {
            ops,
            ops_per_sample,
            magnitude,
        })
    }

    /// The full reduced op set with custom sampling settings.
    pub fn full_set(ops_per_sample: usize, magnitude: u32) -> Result<AugmentPolicy, AugmentError> {
        if magnitude > MAX_MAGNITUDE {
            return Err(AugmentError::Config(format!(
                "magnitude {magnitude} exceeds {MAX_MAGNITUDE}"
            )));
        }
        Ok(AugmentPolicy { ops: ALL_OPS.to_vec(), ops_per_sample, magnitude })
    }

    pub fn ops(&self) -> &[OpKind] {
        &self.ops
    }

    pub fn ops_per_sample(&self) -> usize {
        self.ops_per_sample
    }

    pub fn magnitude(&self) -> u32 {
        self.magnitude
    }

    fn strength(&self) -> f64 {
        f64::from(self.magnitude) / f64::from(MAX_MAGNITUDE)
    }
}

/// Largest shift a weak translation may apply along an axis of length `dim`.
pub fn translation_bound(dim: usize) -> usize {
    (WEAK_TRANSLATE_FRACTION * dim as f64).floor() as usize
}

/// Translates a clip by independent integer shifts on its two leading axes.
///
/// Each shift is uniform over `[-b, b]` with `b = floor(0.15 * dim)`;
/// vacated cells are zero-filled.
pub fn weak_augment(x: &Array3<f64>, rng: &mut impl Rng) -> Array3<f64> {
    let (d0, d1, _) = x.dim();
    let b0 = translation_bound(d0) as i64;
    let b1 = translation_bound(d1) as i64;
    let s0 = rng.random_range(-b0..=b0);
    let s1 = rng.random_range(-b1..=b1);
    shift2(x, s0 as isize, s1 as isize)
}

/// Applies `policy.ops_per_sample` transforms drawn uniformly (with
/// replacement) from the policy's op set, in sampled order.
///
/// Landmark outputs are clamped to `[0, 1]`; latent outputs are unclamped
/// and their value ops use the input's observed min/max.
pub fn strong_augment(
    x: &Array3<f64>,
    modality: Modality,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> Array3<f64> {
    let range = match modality {
        Modality::Landmarks => (0.0, 1.0),
        Modality::Latents => observed_range(x),
    };
    let f = policy.strength();
    let mut out = x.clone();
    for _ in 0..policy.ops_per_sample {
        let op = policy.ops[rng.random_range(0..policy.ops.len())];
        out = apply_op(&out, op, f, range, rng);
    }
    if modality == Modality::Landmarks {
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    out
}

fn observed_range(x: &Array3<f64>) -> (f64, f64) {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 1e-12 {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

fn apply_op(
    x: &Array3<f64>,
    op: OpKind,
    f: f64,
    range: (f64, f64),
    rng: &mut impl Rng,
) -> Array3<f64> {
    let (lo, hi) = range;
    match op {
        OpKind::TranslateY => {
            let b = strong_shift_bound(x.dim().0, f);
            shift2(x, rng.random_range(-b..=b) as isize, 0)
        }
        OpKind::TranslateX => {
            let b = strong_shift_bound(x.dim().1, f);
            shift2(x, 0, rng.random_range(-b..=b) as isize)
        }
        OpKind::Cutout => cutout(x, f, rng),
        OpKind::ValueScale => {
            let s = rng.random_range(1.0 - 0.9 * f..=1.0 + 0.9 * f);
            let mid = 0.5 * (lo + hi);
            x.mapv(|v| mid + s * (v - mid))
        }
        OpKind::ValueShift => {
            let delta = rng.random_range(-0.5 * f..=0.5 * f) * (hi - lo);
            x.mapv(|v| v + delta)
        }
        OpKind::Sharpen1d => {
            let a = rng.random_range(1.0 - 0.9 * f..=1.0 + 0.9 * f);
            sharpen_time(x, a)
        }
        OpKind::SolarizeThreshold => {
            let thr = hi - f * (hi - lo);
            x.mapv(|v| if v >= thr { lo + hi - v } else { v })
        }
        OpKind::PosterizeQuantize => posterize(x, f, lo, hi),
        OpKind::AutocontrastRescale => autocontrast(x, lo, hi),
        OpKind::EqualizeHistogram => equalize(x, lo, hi),
        OpKind::Identity => x.clone(),
    }
}

fn strong_shift_bound(dim: usize, f: f64) -> i64 {
    (0.3 * f * dim as f64).floor() as i64
}

/// Shifts content toward higher indices for positive shifts; zero fill.
fn shift2(x: &Array3<f64>, s0: isize, s1: isize) -> Array3<f64> {
    let (d0, d1, d2) = x.dim();
    let mut out = Array3::<f64>::zeros((d0, d1, d2));
    for t in 0..d0 {
        let src0 = t as isize - s0;
        if src0 < 0 || src0 >= d0 as isize {
            continue;
        }
        for p in 0..d1 {
            let src1 = p as isize - s1;
            if src1 < 0 || src1 >= d1 as isize {
                continue;
            }
            for a in 0..d2 {
                out[(t, p, a)] = x[(src0 as usize, src1 as usize, a)];
            }
        }
    }
    out
}

fn cutout(x: &Array3<f64>, f: f64, rng: &mut impl Rng) -> Array3<f64> {
    let (d0, d1, _) = x.dim();
    let h0 = (0.5 * f * d0 as f64).floor() as usize;
    let h1 = (0.5 * f * d1 as f64).floor() as usize;
    if h0 == 0 || h1 == 0 {
        return x.clone();
    }
    let t0 = rng.random_range(0..=d0 - h0);
    let p0 = rng.random_range(0..=d1 - h1);
    let mut out = x.clone();
    out.slice_mut(ndarray::s![t0..t0 + h0, p0..p0 + h1, ..])
        .fill(0.0);
    out
}

/// Blends toward (`a < 1`) or away from (`a > 1`) a 1-2-1 time smoothing
/// with edge replication.
fn sharpen_time(x: &Array3<f64>, a: f64) -> Array3<f64> {
    let (d0, d1, d2) = x.dim();
    let mut out = Array3::<f64>::zeros((d0, d1, d2));
    for t in 0..d0 {
        let prev = t.saturating_sub(1);
        let next = (t + 1).min(d0 - 1);
        for p in 0..d1 {
            for c in 0..d2 {
                let smooth =
                    0.25 * (x[(prev, p, c)] + 2.0 * x[(t, p, c)] + x[(next, p, c)]);
                out[(t, p, c)] = smooth + a * (x[(t, p, c)] - smooth);
            }
        }
    }
    out
}

/// Quantizes to `2 + floor((1 - f) * 254)` levels over `[lo, hi]`:
/// 256 levels at strength 0 down to 2 at strength 1.
fn posterize(x: &Array3<f64>, f: f64, lo: f64, hi: f64) -> Array3<f64> {
    let levels = 2 + ((1.0 - f) * 254.0).floor() as usize;
    let steps = (levels - 1) as f64;
    x.mapv(|v| {
        let unit = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        lo + (unit * steps).round() / steps * (hi - lo)
    })
}

fn autocontrast(x: &Array3<f64>, lo: f64, hi: f64) -> Array3<f64> {
    let (min, max) = {
        let min = x.iter().copied().fold(f64::INFINITY, f64::min);
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    };
    if max - min < 1e-12 {
        return x.clone();
    }
    x.mapv(|v| lo + (v - min) / (max - min) * (hi - lo))
}

/// Remaps values through the 256-bin empirical CDF of the clip, scaled onto
/// `[lo, hi]`. Monotone; constant clips are returned unchanged.
fn equalize(x: &Array3<f64>, lo: f64, hi: f64) -> Array3<f64> {
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max - min < 1e-12 {
        return x.clone();
    }
    let bin_of = |v: f64| (((v - min) / (max - min)) * 255.0).floor().min(255.0) as usize;
    let mut hist = [0u64; 256];
    for &v in x.iter() {
        hist[bin_of(v)] += 1;
    }
    let mut cdf = [0.0f64; 256];
    let total = x.len() as f64;
    let mut cum = 0u64;
    for (b, &count) in hist.iter().enumerate() {
        cum += count;
        cdf[b] = cum as f64 / total;
    }
    x.mapv(|v| lo + cdf[bin_of(v)] * (hi - lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{rng_for, stream};
    use ndarray::Array3;

    fn random_clip(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut state = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
        Array3::from_shape_fn(shape, |_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    fn naive_shift(x: &Array3<f64>, s0: isize, s1: isize) -> Array3<f64> {
        let (d0, d1, d2) = x.dim();
        let mut out = Array3::<f64>::zeros((d0, d1, d2));
        for t in 0..d0 as isize {
            for p in 0..d1 as isize {
                for a in 0..d2 {
                    let (st, sp) = (t - s0, p - s1);
                    if st >= 0 && st < d0 as isize && sp >= 0 && sp < d1 as isize {
                        out[(t as usize, p as usize, a)] =
                            x[(st as usize, sp as usize, a)];
                    }
                }
            }
        }
        out
    }

    /// Recovers the (unique, for a generic clip) shift that maps x to y.
    fn detect_shift(x: &Array3<f64>, y: &Array3<f64>, bound: isize) -> Option<(isize, isize)> {
        for s0 in -bound..=bound {
            for s1 in -bound..=bound {
                if naive_shift(x, s0, s1) == *y {
                    return Some((s0, s1));
                }
            }
        }
        None
    }

    #[test]
    fn translation_bounds_round_toward_zero() {
        assert_eq!(translation_bound(30), 4);
        assert_eq!(translation_bound(50), 7);
        assert_eq!(translation_bound(68), 10);
        assert_eq!(translation_bound(20), 3);
        assert_eq!(translation_bound(6), 0);
    }

    #[test]
    fn weak_augment_is_a_bounded_zero_fill_shift() {
        let x = random_clip((30, 50, 1), 7);
        let mut hit_max = false;
        for i in 0..200u64 {
            let mut rng = rng_for(9, &[stream::AUGMENT_WEAK, i]);
            let y = weak_augment(&x, &mut rng);
            let (s0, s1) = detect_shift(&x, &y, 11).expect("output is not a pure shift");
            assert!(s0.abs() <= 4, "time shift {s0} above bound");
            assert!(s1.abs() <= 7, "space shift {s1} above bound");
            hit_max |= s0.abs() == 4 || s1.abs() == 7;
        }
        assert!(hit_max, "maximal shift never sampled in 200 draws");
    }

    #[test]
    fn weak_augment_on_tiny_axes_is_identity() {
        // Bounds floor to zero for axes of length <= 6.
        let x = random_clip((4, 5, 2), 3);
        for i in 0..20u64 {
            let mut rng = rng_for(1, &[stream::AUGMENT_WEAK, i]);
            assert_eq!(weak_augment(&x, &mut rng), x);
        }
    }

    #[test]
    fn weak_augment_is_seed_deterministic() {
        let x = random_clip((30, 68, 3), 11);
        let a = weak_augment(&x, &mut rng_for(5, &[stream::AUGMENT_WEAK, 0]));
        let b = weak_augment(&x, &mut rng_for(5, &[stream::AUGMENT_WEAK, 0]));
        let c = weak_augment(&x, &mut rng_for(5, &[stream::AUGMENT_WEAK, 1]));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn policy_rejects_excluded_unknown_and_malformed() {
        for name in ["rotate", "shear_x", "shear_y"] {
            let err = AugmentPolicy::from_names(&["identity", name], 2, 10).unwrap_err();
            assert!(matches!(err, AugmentError::ExcludedOp(n) if n == name));
        }
        assert!(matches!(
            AugmentPolicy::from_names(&["warp"], 2, 10),
            Err(AugmentError::UnknownOp(_))
        ));
        assert!(matches!(
            AugmentPolicy::from_names(&["cutout", "cutout"], 2, 10),
            Err(AugmentError::Config(_))
        ));
        assert!(matches!(
            AugmentPolicy::from_names(&[], 2, 10),
            Err(AugmentError::Config(_))
        ));
        assert!(matches!(
            AugmentPolicy::from_names(&["identity"], 2, 31),
            Err(AugmentError::Config(_))
        ));
    }

    #[test]
    fn default_policy_covers_the_full_reduced_op_set() {
        let policy = AugmentPolicy::default();
        assert_eq!(policy.ops().len(), 11);
        assert_eq!(policy.ops_per_sample(), 2);
        assert_eq!(policy.magnitude(), 10);
        let names: Vec<&str> = policy.ops().iter().map(|o| o.name()).collect();
        let rebuilt = AugmentPolicy::from_names(&names, 2, 10).unwrap();
        assert_eq!(rebuilt.ops(), policy.ops());
    }

    #[test]
    fn zero_ops_per_sample_is_identity() {
        let x = random_clip((30, 68, 3), 2);
        let policy = AugmentPolicy::from_names(&["cutout", "value_shift"], 0, 30).unwrap();
        let mut rng = rng_for(4, &[stream::AUGMENT_STRONG, 0]);
        assert_eq!(strong_augment(&x, Modality::Landmarks, &policy, &mut rng), x);
    }

    #[test]
    fn strong_augment_preserves_shape_and_landmark_range() {
        let x = random_clip((30, 68, 3), 5);
        let policy = AugmentPolicy::default();
        let mut changed = 0;
        for i in 0..20u64 {
            let mut rng = rng_for(8, &[stream::AUGMENT_STRONG, i]);
            let y = strong_augment(&x, Modality::Landmarks, &policy, &mut rng);
            assert_eq!(y.dim(), (30, 68, 3));
            assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
            if y != x {
                changed += 1;
            }
        }
        assert!(changed >= 15, "only {changed}/20 draws changed the clip");
    }

    #[test]
    fn strong_augment_is_seed_deterministic() {
        let x = random_clip((30, 50, 1), 17);
        let policy = AugmentPolicy::default();
        let a = strong_augment(
            &x,
            Modality::Latents,
            &policy,
            &mut rng_for(3, &[stream::AUGMENT_STRONG, 0]),
        );
        let b = strong_augment(
            &x,
            Modality::Latents,
            &policy,
            &mut rng_for(3, &[stream::AUGMENT_STRONG, 0]),
        );
        assert_eq!(a, b);
    }

    #[test]
    fn latents_are_not_clamped_to_unit_range() {
        let mut x = random_clip((30, 50, 1), 23);
        x.mapv_inplace(|v| v * 5.0 - 2.0);
        let policy = AugmentPolicy::from_names(&["identity"], 1, 10).unwrap();
        let mut rng = rng_for(6, &[stream::AUGMENT_STRONG, 0]);
        let y = strong_augment(&x, Modality::Latents, &policy, &mut rng);
        assert_eq!(y, x);
        assert!(y.iter().copied().fold(f64::INFINITY, f64::min) < 0.0);
    }

    #[test]
    fn landmark_clamp_engages_on_out_of_range_shifts() {
        let x = Array3::<f64>::ones((30, 68, 3));
        let policy = AugmentPolicy::from_names(&["value_shift"], 1, 30).unwrap();
        let mut saturated = false;
        for i in 0..50u64 {
            let mut rng = rng_for(2, &[stream::AUGMENT_STRONG, i]);
            let y = strong_augment(&x, Modality::Landmarks, &policy, &mut rng);
            assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
            // An upward shift on an all-ones clip only survives via the clamp.
            saturated |= y == x && {
                let mut probe = rng_for(2, &[stream::AUGMENT_STRONG, i]);
                let delta = probe.random_range(-0.5..=0.5);
                delta > 0.0
            };
        }
        assert!(saturated, "no positive shift hit the clamp in 50 draws");
    }

    #[test]
    fn strong_translate_ops_shift_one_axis_only() {
        let x = random_clip((30, 50, 1), 31);
        let policy_x = AugmentPolicy::from_names(&["translate_x"], 1, 30).unwrap();
        let policy_y = AugmentPolicy::from_names(&["translate_y"], 1, 30).unwrap();
        for i in 0..30u64 {
            let mut rng = rng_for(12, &[stream::AUGMENT_STRONG, i]);
            let y = strong_augment(&x, Modality::Latents, &policy_x, &mut rng);
            let (s0, s1) = detect_shift(&x, &y, 15).unwrap();
            assert_eq!(s0, 0);
            assert!(s1.abs() <= 15, "axis-1 shift bound is floor(0.3 * 50)");

            let mut rng = rng_for(13, &[stream::AUGMENT_STRONG, i]);
            let y = strong_augment(&x, Modality::Latents, &policy_y, &mut rng);
            let (s0, s1) = detect_shift(&x, &y, 15).unwrap();
            assert_eq!(s1, 0);
            assert!(s0.abs() <= 9, "axis-0 shift bound is floor(0.3 * 30)");
        }
    }

    #[test]
    fn cutout_zeroes_one_rectangle_and_nothing_else() {
        let mut x = random_clip((30, 50, 2), 41);
        x.mapv_inplace(|v| v + 0.1);
        let policy = AugmentPolicy::from_names(&["cutout"], 1, 30).unwrap();
        let mut rng = rng_for(14, &[stream::AUGMENT_STRONG, 0]);
        let y = strong_augment(&x, Modality::Latents, &policy, &mut rng);
        let zeros: Vec<(usize, usize)> = y
            .indexed_iter()
            .filter(|(_, &v)| v == 0.0)
            .map(|((t, p, _), _)| (t, p))
            .collect();
        assert!(!zeros.is_empty());
        let (t_lo, t_hi) = zeros.iter().fold((usize::MAX, 0), |(lo, hi), &(t, _)| {
            (lo.min(t), hi.max(t))
        });
        let (p_lo, p_hi) = zeros.iter().fold((usize::MAX, 0), |(lo, hi), &(_, p)| {
            (lo.min(p), hi.max(p))
        });
        assert_eq!(t_hi - t_lo + 1, 15, "block height is floor(0.5 * 30)");
        assert_eq!(p_hi - p_lo + 1, 25, "block width is floor(0.5 * 50)");
        for ((t, p, c), &v) in y.indexed_iter() {
            if (t_lo..=t_hi).contains(&t) && (p_lo..=p_hi).contains(&p) {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, x[(t, p, c)]);
            }
        }
    }

    #[test]
    fn value_scale_fixes_midpoint_and_bounds_the_factor() {
        let x = random_clip((10, 8, 1), 51);
        let mut rng = rng_for(15, &[stream::AUGMENT_STRONG, 0]);
        let f = 10.0 / 30.0;
        let y = apply_op(&x, OpKind::ValueScale, f, (0.0, 1.0), &mut rng);
        // Recover the factor from any two distinct cells.
        let s = (y[(0, 0, 0)] - y[(1, 0, 0)]) / (x[(0, 0, 0)] - x[(1, 0, 0)]);
        assert!((1.0 - 0.9 * f..=1.0 + 0.9 * f).contains(&s));
        let expected = x.mapv(|v| 0.5 + s * (v - 0.5));
        for (a, b) in y.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        let mid = Array3::<f64>::from_elem((4, 4, 1), 0.5);
        let mut rng = rng_for(16, &[stream::AUGMENT_STRONG, 0]);
        let z = apply_op(&mid, OpKind::ValueScale, 1.0, (0.0, 1.0), &mut rng);
        for v in z.iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn value_shift_adds_one_bounded_constant() {
        let x = random_clip((10, 8, 1), 61);
        let mut rng = rng_for(17, &[stream::AUGMENT_STRONG, 0]);
        let f = 1.0;
        let y = apply_op(&x, OpKind::ValueShift, f, (-2.0, 3.0), &mut rng);
        let delta = y[(0, 0, 0)] - x[(0, 0, 0)];
        assert!(delta.abs() <= 0.5 * f * 5.0 + 1e-12);
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b - delta).abs() < 1e-12);
        }
    }

    #[test]
    fn sharpen_matches_hand_smoothing_and_fixes_constants() {
        // Time impulse at t=1 on a 4-frame clip, 1-2-1 kernel, edges replicated.
        let mut x = Array3::<f64>::zeros((4, 1, 1));
        x[(1, 0, 0)] = 1.0;
        let smooth = [0.25, 0.5, 0.25, 0.0];
        let a = 1.6;
        let y = sharpen_time(&x, a);
        for t in 0..4 {
            let want = smooth[t] + a * (x[(t, 0, 0)] - smooth[t]);
            assert!((y[(t, 0, 0)] - want).abs() < 1e-12);
        }

        let flat = Array3::<f64>::from_elem((6, 3, 2), 0.7);
        assert_eq!(sharpen_time(&flat, 0.3), flat);
    }

    #[test]
    fn solarize_inverts_above_the_threshold() {
        let mut x = Array3::<f64>::zeros((1, 4, 1));
        for (p, v) in [0.1, 0.4, 0.6, 0.9].iter().enumerate() {
            x[(0, p, 0)] = *v;
        }
        let mut rng = rng_for(18, &[stream::AUGMENT_STRONG, 0]);
        // f = 0.5 over [0, 1] puts the threshold at 0.5.
        let y = apply_op(&x, OpKind::SolarizeThreshold, 0.5, (0.0, 1.0), &mut rng);
        let want = [0.1, 0.4, 0.4, 0.1];
        for p in 0..4 {
            assert!((y[(0, p, 0)] - want[p]).abs() < 1e-12);
        }
        // Full strength inverts everything.
        let z = apply_op(&x, OpKind::SolarizeThreshold, 1.0, (0.0, 1.0), &mut rng);
        for p in 0..4 {
            assert!((z[(0, p, 0)] - (1.0 - x[(0, p, 0)])).abs() < 1e-12);
        }
    }

    #[test]
    fn posterize_at_full_strength_is_binary() {
        let mut x = Array3::<f64>::zeros((1, 3, 1));
        for (p, v) in [0.2, 0.5, 0.7].iter().enumerate() {
            x[(0, p, 0)] = *v;
        }
        let y = posterize(&x, 1.0, 0.0, 1.0);
        let want = [0.0, 1.0, 1.0];
        for p in 0..3 {
            assert!((y[(0, p, 0)] - want[p]).abs() < 1e-12);
        }
        // Strength 0 keeps 256 levels: error at most half a step.
        let z = posterize(&x, 0.0, 0.0, 1.0);
        for (a, b) in z.iter().zip(x.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn autocontrast_spans_the_target_range() {
        let mut x = Array3::<f64>::zeros((1, 3, 1));
        for (p, v) in [0.2, 0.4, 0.6].iter().enumerate() {
            x[(0, p, 0)] = *v;
        }
        let y = autocontrast(&x, 0.0, 1.0);
        let want = [0.0, 0.5, 1.0];
        for p in 0..3 {
            assert!((y[(0, p, 0)] - want[p]).abs() < 1e-12);
        }
        let flat = Array3::<f64>::from_elem((2, 2, 1), 0.3);
        assert_eq!(autocontrast(&flat, 0.0, 1.0), flat);
    }

    #[test]
    fn equalize_matches_the_cdf_remap_and_keeps_order() {
        // Values {0.0, 0.5, 1.0, 1.0}: cdf 1/4, 2/4, 4/4.
        let mut x = Array3::<f64>::zeros((1, 4, 1));
        for (p, v) in [0.0, 0.5, 1.0, 1.0].iter().enumerate() {
            x[(0, p, 0)] = *v;
        }
        let y = equalize(&x, 0.0, 1.0);
        let want = [0.25, 0.5, 1.0, 1.0];
        for p in 0..4 {
            assert!((y[(0, p, 0)] - want[p]).abs() < 1e-12);
        }

        let r = random_clip((10, 10, 1), 71);
        let e = equalize(&r, 0.0, 1.0);
        let mut pairs: Vec<(f64, f64)> = r.iter().copied().zip(e.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[1].1 >= w[0].1, "equalize must be monotone");
        }
        assert!(e.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn every_op_preserves_shape() {
        let x = random_clip((30, 68, 3), 81);
        for (i, &op) in ALL_OPS.iter().enumerate() {
            let mut rng = rng_for(19, &[stream::AUGMENT_STRONG, i as u64]);
            let y = apply_op(&x, op, 1.0, (0.0, 1.0), &mut rng);
            assert_eq!(y.dim(), x.dim(), "{} changed the shape", op.name());
        }
    }
}
