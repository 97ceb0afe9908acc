//! Landmark clip normalization: rotation alignment and per-frame scaling.
//!
//! Every frame's head pose is described by three angles extracted in a
//! fixed sequence: roll from the eye-centroid line projected to the xy
//! plane, then yaw from the eye line's remaining depth difference, then
//! pitch from the eye-mean-to-mouth segment. Rotating a frame by the
//! inverse of its angles brings it into the canonical orientation:
//!
//! - the eye centroids share y and z (eye line along the x axis),
//! - the eye-centroid mean and the mouth centroid share x and z,
//! - the nose-foremost centroid and the centroid of all other landmarks
//!   share x and y (the nose protrudes along z only).
//!
//! Clips are normalized per frame, rotations are applied about the frame's
//! landmark centroid (translation is irrelevant because min-max scaling
//! removes it), and scaling to [0,1] happens last.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, LandmarkClip, CLIP_FRAMES, LANDMARK_AXES, LANDMARK_POINTS};

/// Index sets of the 68-point landmark scheme.
///
/// "Right"/"left" are from the subject's perspective. The foremost nose
/// points are the tip and the two nostril wings, a symmetric triple that
/// protrudes from the face plane.
pub mod landmarks {
    pub const JAW: std::ops::RangeInclusive<usize> = 0..=16;
    pub const RIGHT_BROW: std::ops::RangeInclusive<usize> = 17..=21;
    pub const LEFT_BROW: std::ops::RangeInclusive<usize> = 22..=26;
    pub const NOSE_BRIDGE: std::ops::RangeInclusive<usize> = 27..=30;
    pub const NOSE_FLOOR: std::ops::RangeInclusive<usize> = 31..=35;
    pub const RIGHT_EYE: std::ops::RangeInclusive<usize> = 36..=41;
    pub const LEFT_EYE: std::ops::RangeInclusive<usize> = 42..=47;
    pub const MOUTH: std::ops::RangeInclusive<usize> = 48..=67;
    pub const NOSE_FOREMOST: [usize; 3] = [30, 31, 35];
}

#[derive(Debug, Error)]
pub enum FaceError {
    #[error("frame {frame}: unalignable geometry ({reason})")]
    Unalignable { frame: usize, reason: String },
    #[error("frame {frame}: axis {axis} has zero range, cannot min-max scale")]
    ZeroRangeAxis { frame: usize, axis: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, FaceError>;

/// One frame of 68 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkFrame {
    points: Array2<f64>,
}

impl LandmarkFrame {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.shape() != [LANDMARK_POINTS, LANDMARK_AXES] {
            return Err(FaceError::Data(DataError::ClipShape {
                want: vec![LANDMARK_POINTS, LANDMARK_AXES],
                got: points.shape().to_vec(),
            }));
        }
        Ok(LandmarkFrame { points })
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }
}

/// Head pose angles in radians, each in (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationState {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

/// How per-frame rotations accumulate across the clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// Frame t keeps its motion relative to frame 1: every frame is rotated
    /// by the inverse of the first frame's pose.
    #[default]
    RelativeToFirst,
    /// Frame t keeps only its motion since frame t-1: frame t is rotated by
    /// the inverse of frame t-1's pose.
    PerFrameDelta,
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Composes the pose rotation for given angles: `R_z(roll) R_y(yaw) R_x(pitch)`.
///
/// [`alignment_rotation`] is its exact inverse (transpose).
pub fn pose_rotation(state: &RotationState) -> Mat3 {
    mat_mul(&rot_z(state.roll), &mat_mul(&rot_y(state.yaw), &rot_x(state.pitch)))
}

/// The rotation that brings a frame with the given pose into canonical
/// orientation: `R_x(-pitch) R_y(-yaw) R_z(-roll)`.
pub fn alignment_rotation(state: &RotationState) -> Mat3 {
    mat_mul(&rot_x(-state.pitch), &mat_mul(&rot_y(-state.yaw), &rot_z(-state.roll)))
}

/// Rotates all points about the origin.
pub fn rotate_points(points: &Array2<f64>, r: &Mat3) -> Array2<f64> {
    let mut out = Array2::zeros(points.raw_dim());
    for (p, mut o) in points.rows().into_iter().zip(out.rows_mut()) {
        for i in 0..3 {
            o[i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
    }
    out
}

fn centroid_of(points: &Array2<f64>, idx: impl Iterator<Item = usize>) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for i in idx {
        for a in 0..3 {
            acc[a] += points[(i, a)];
        }
        n += 1;
    }
    for v in &mut acc {
        *v /= n as f64;
    }
    acc
}

fn centroid_all(points: &Array2<f64>) -> [f64; 3] {
    centroid_of(points, 0..points.nrows())
}

const DEGENERATE_EPS: f64 = 1e-9;

fn wrap_angle(a: f64) -> f64 {
    if a == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        a
    }
}

fn angles_inner(points: &Array2<f64>, frame: usize) -> Result<RotationState> {
    let degenerate = |reason: &str| FaceError::Unalignable { frame, reason: reason.to_string() };
    let r = centroid_of(points, landmarks::RIGHT_EYE);
    let l = centroid_of(points, landmarks::LEFT_EYE);
    let v = [l[0] - r[0], l[1] - r[1], l[2] - r[2]];
    if v.iter().map(|x| x * x).sum::<f64>().sqrt() < DEGENERATE_EPS {
        return Err(degenerate("eye centroids coincide"));
    }
    if v[0].hypot(v[1]) < DEGENERATE_EPS {
        return Err(degenerate("eye line has no xy projection, roll undefined"));
    }
    let roll = v[1].atan2(v[0]);

    let p1 = rotate_points(points, &rot_z(-roll));
    let r1 = centroid_of(&p1, landmarks::RIGHT_EYE);
    let l1 = centroid_of(&p1, landmarks::LEFT_EYE);
    let v1 = [l1[0] - r1[0], l1[1] - r1[1], l1[2] - r1[2]];
    if v1[0].hypot(v1[2]) < DEGENERATE_EPS {
        return Err(degenerate("eye line has no xz projection, yaw undefined"));
    }
    let yaw = (-v1[2]).atan2(v1[0]);

    let p2 = rotate_points(&p1, &rot_y(-yaw));
    let eye_mean = {
        let r2 = centroid_of(&p2, landmarks::RIGHT_EYE);
        let l2 = centroid_of(&p2, landmarks::LEFT_EYE);
        [(r2[0] + l2[0]) / 2.0, (r2[1] + l2[1]) / 2.0, (r2[2] + l2[2]) / 2.0]
    };
    let mouth = centroid_of(&p2, landmarks::MOUTH);
    let m = [mouth[0] - eye_mean[0], mouth[1] - eye_mean[1], mouth[2] - eye_mean[2]];
    if m[1].hypot(m[2]) < DEGENERATE_EPS {
        return Err(degenerate("eye-mouth segment has no yz projection, pitch undefined"));
    }
    let pitch = (-m[2]).atan2(-m[1]);

    Ok(RotationState {
        roll: wrap_angle(roll),
        pitch: wrap_angle(pitch),
        yaw: wrap_angle(yaw),
    })
}

/// Extracts (roll, pitch, yaw) such that [`alignment_rotation`] applied to
/// the frame satisfies the three canonical alignment predicates.
pub fn alignment_angles(frame: &LandmarkFrame) -> Result<RotationState> {
    angles_inner(frame.points(), 0)
}

/// Min-max scales each axis of a frame independently to [0,1].
pub fn scale_frame(frame: &LandmarkFrame) -> Result<LandmarkFrame> {
    Ok(LandmarkFrame { points: scale_points(frame.points(), 0)? })
}

fn scale_points(points: &Array2<f64>, frame: usize) -> Result<Array2<f64>> {
    let mut out = points.clone();
    for axis in 0..3 {
        let col = points.column(axis);
        let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(max > min) {
            return Err(FaceError::ZeroRangeAxis { frame, axis });
        }
        // True division keeps the extremes exactly at 0 and 1.
        let range = max - min;
        for v in out.column_mut(axis).iter_mut() {
            *v = (*v - min) / range;
        }
    }
    Ok(out)
}

/// Normalizes a raw landmark clip: per-frame rotation handling followed by
/// per-frame min-max scaling. The output clip is flagged normalized.
pub fn normalize_clip(clip: &LandmarkClip, mode: RotationMode) -> Result<LandmarkClip> {
    let frames = clip.frames();
    let mut pts: Vec<Array2<f64>> = Vec::with_capacity(CLIP_FRAMES);
    for t in 0..CLIP_FRAMES {
        let mut p = Array2::<f64>::zeros((LANDMARK_POINTS, LANDMARK_AXES));
        for i in 0..LANDMARK_POINTS {
            for a in 0..LANDMARK_AXES {
                p[(i, a)] = frames[(t, i, a)] as f64;
            }
        }
        pts.push(p);
    }

    let mut states = Vec::with_capacity(CLIP_FRAMES);
    for (t, p) in pts.iter().enumerate() {
        states.push(angles_inner(p, t)?);
    }

    let mut out = Array3::<f32>::zeros((CLIP_FRAMES, LANDMARK_POINTS, LANDMARK_AXES));
    for t in 0..CLIP_FRAMES {
        let reference = match mode {
            RotationMode::RelativeToFirst => &states[0],
            RotationMode::PerFrameDelta => &states[t.saturating_sub(1)],
        };
        let rot = alignment_rotation(reference);
        let c = centroid_all(&pts[t]);
        let mut centered = pts[t].clone();
        for mut row in centered.rows_mut() {
            for a in 0..3 {
                row[a] -= c[a];
            }
        }
        let rotated = rotate_points(&centered, &rot);
        let scaled = scale_points(&rotated, t)?;
        for i in 0..LANDMARK_POINTS {
            for a in 0..LANDMARK_AXES {
                out[(t, i, a)] = scaled[(i, a)] as f32;
            }
        }
    }
    Ok(LandmarkClip::new(out, true)?)
}

/// Checks the three canonical alignment predicates on a frame and returns
/// the largest violation.
pub fn alignment_residual(points: &Array2<f64>) -> f64 {
    let r = centroid_of(points, landmarks::RIGHT_EYE);
    let l = centroid_of(points, landmarks::LEFT_EYE);
    let eye_mean = [(r[0] + l[0]) / 2.0, (r[1] + l[1]) / 2.0, (r[2] + l[2]) / 2.0];
    let mouth = centroid_of(points, landmarks::MOUTH);
    let nose = centroid_of(points, landmarks::NOSE_FOREMOST.iter().copied());
    let other = centroid_of(
        points,
        (0..points.nrows()).filter(|i| !landmarks::NOSE_FOREMOST.contains(i)),
    );
    let residuals = [
        (l[1] - r[1]).abs(),
        (l[2] - r[2]).abs(),
        (eye_mean[0] - mouth[0]).abs(),
        (eye_mean[2] - mouth[2]).abs(),
        (nose[0] - other[0]).abs(),
        (nose[1] - other[1]).abs(),
    ];
    residuals.into_iter().fold(0.0, f64::max)
}

/// A synthetic 68-point face in canonical orientation.
///
/// The template satisfies all three alignment predicates exactly: it is
/// left-right symmetric, the eye line runs along x, the mouth sits straight
/// below the eye midpoint at equal depth, and the foremost nose points are
/// adjusted so their centroid matches the remaining landmarks in x and y.
pub fn canonical_template() -> Array2<f64> {
    let mut p = Array2::<f64>::zeros((LANDMARK_POINTS, LANDMARK_AXES));
    fn set(p: &mut Array2<f64>, i: usize, x: f64, y: f64, z: f64) {
        p[(i, 0)] = x;
        p[(i, 1)] = y;
        p[(i, 2)] = z;
    }

    for i in 0..=16 {
        let u = (i as f64 - 8.0) / 8.0;
        let y = 0.5 - 2.6 * (1.0 - u * u).sqrt().mul_add(0.9, -0.05);
        set(&mut p, i, 1.55 * u, y, -0.1 - 0.55 * u * u);
    }
    for (k, i) in (17..=21).enumerate() {
        let u = k as f64 / 4.0;
        let x = -1.42 + 0.86 * u;
        let y = 0.95 + 0.22 * (std::f64::consts::PI * u).sin();
        set(&mut p, i, x, y, 0.12);
        set(&mut p, i + 5, -x, y, 0.12);
    }
    set(&mut p, 27, 0.0, 0.85, 0.20);
    set(&mut p, 28, 0.0, 0.60, 0.35);
    set(&mut p, 29, 0.0, 0.35, 0.55);
    set(&mut p, 30, 0.0, 0.10, 0.80);
    set(&mut p, 31, -0.30, -0.12, 0.45);
    set(&mut p, 32, -0.15, -0.18, 0.55);
    set(&mut p, 33, 0.0, -0.20, 0.60);
    set(&mut p, 34, 0.15, -0.18, 0.55);
    set(&mut p, 35, 0.30, -0.12, 0.45);

    let hex = [
        (-0.30, 0.0),
        (-0.12, 0.12),
        (0.12, 0.12),
        (0.30, 0.0),
        (0.12, -0.12),
        (-0.12, -0.12),
    ];
    for (k, (dx, dy)) in hex.iter().enumerate() {
        set(&mut p, 36 + k, -0.95 + dx, 0.45 + dy, 0.25);
        set(&mut p, 42 + k, 0.95 - dx, 0.45 + dy, 0.25);
    }

    for k in 0..12 {
        let a = 2.0 * std::f64::consts::PI * k as f64 / 12.0;
        set(&mut p, 48 + k, 0.55 * a.cos(), -1.15 + 0.28 * a.sin(), 0.25);
    }
    for k in 0..8 {
        let a = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
        set(&mut p, 60 + k, 0.30 * a.cos(), -1.15 + 0.12 * a.sin(), 0.25);
    }

    // Snap rounding dust (cos(pi/2) and friends) to exact zeros so the
    // template's symmetries hold bit-exactly.
    p.mapv_inplace(|v| if v.abs() < 1e-12 { 0.0 } else { v });

    // Shift the foremost nose triple so its centroid matches the remaining
    // landmarks in y exactly (x already matches by symmetry).
    let nose_y: f64 =
        landmarks::NOSE_FOREMOST.iter().map(|&i| p[(i, 1)]).sum::<f64>() / 3.0;
    let other_y: f64 = (0..LANDMARK_POINTS)
        .filter(|i| !landmarks::NOSE_FOREMOST.contains(i))
        .map(|i| p[(i, 1)])
        .sum::<f64>()
        / (LANDMARK_POINTS - 3) as f64;
    for &i in &landmarks::NOSE_FOREMOST {
        p[(i, 1)] += other_y - nose_y;
    }
    p
}
