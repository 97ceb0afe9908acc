//! MFCC feature extraction over 1/30 s waveform chunks.
//!
//! A chunk of 1470 samples (44.1 kHz / 30) is pre-emphasized, cut into
//! overlapping Hann-windowed sub-windows, turned into a power spectrum via
//! FFT, pooled by a triangular mel filterbank, logged and decorrelated with
//! an orthonormal DCT-II. The first and second temporal derivatives are
//! appended as extra channels using a symmetric regression window with
//! edge replication.

use ndarray::{Array2, Array3};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SAMPLE_RATE: u32 = 44_100;
pub const CHUNK_SAMPLES: usize = 1_470;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("sample rate {0} unsupported, expected {SAMPLE_RATE}")]
    WrongRate(u32),
    #[error("chunk must have exactly {CHUNK_SAMPLES} samples, got {0}")]
    WrongLength(usize),
    #[error("sample {value} at index {index} outside [-1,1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("invalid MFCC config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// One 1/30 s mono chunk with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioChunk {
    samples: Vec<f64>,
}

impl AudioChunk {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.len() != CHUNK_SAMPLES {
            return Err(AudioError::WrongLength(samples.len()));
        }
        for (i, &v) in samples.iter().enumerate() {
            if !(-1.0..=1.0).contains(&v) {
                return Err(AudioError::OutOfRange { index: i, value: v });
            }
        }
        Ok(AudioChunk { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }
}

/// Splits a waveform into consecutive non-overlapping chunks; a trailing
/// partial chunk is dropped.
pub fn chunk_stream(waveform: &[f64], rate: u32) -> Result<Vec<AudioChunk>> {
    if rate != SAMPLE_RATE {
        return Err(AudioError::WrongRate(rate));
    }
    waveform
        .chunks_exact(CHUNK_SAMPLES)
        .map(|c| AudioChunk::new(c.to_vec()))
        .collect()
}

/// MFCC extraction settings.
///
/// Defaults: 40 sub-windows of 256 samples at hop 31 (the largest tiling
/// that fits a 1470-sample chunk), 26 mel filters, 18 kept coefficients,
/// pre-emphasis 0.97, periodic Hann window. Sub-windows that would overrun
/// the chunk are reflection-padded (never triggered by the defaults).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MfccConfig {
    pub sub_windows: usize,
    pub window_len: usize,
    pub hop: usize,
    pub mel_filters: usize,
    pub coefficients: usize,
    pub pre_emphasis: f64,
    pub delta_width: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sub_windows: 40,
            window_len: 256,
            hop: 31,
            mel_filters: 26,
            coefficients: 18,
            pre_emphasis: 0.97,
            delta_width: 2,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sub_windows == 0 || self.window_len == 0 || self.hop == 0 {
            return Err(AudioError::Config("window counts must be positive".into()));
        }
        if self.coefficients > self.mel_filters {
            return Err(AudioError::Config(format!(
                "cannot keep {} coefficients from {} mel filters",
                self.coefficients, self.mel_filters
            )));
        }
        if self.delta_width == 0 {
            return Err(AudioError::Config("delta regression width must be >= 1".into()));
        }
        Ok(())
    }
}

/// `T x coefficients x 3` feature block: static, first and second
/// temporal derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccTensor {
    values: Array3<f64>,
}

impl MfccTensor {
    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }
}

const LOG_FLOOR: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank over FFT power bins, HTK mel spacing, 0..Nyquist.
fn mel_filterbank(n_filters: usize, n_fft: usize) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let mel_lo = hz_to_mel(0.0);
    let mel_hi = hz_to_mel(nyquist);
    let centers: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_filters + 1) as f64))
        .collect();
    let mut fb = Array2::<f64>::zeros((n_filters, n_bins));
    for m in 0..n_filters {
        let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        for (bin, w) in fb.row_mut(m).iter_mut().enumerate() {
            let f = bin as f64 * SAMPLE_RATE as f64 / n_fft as f64;
            *w = if f >= lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
        }
    }
    fb
}

/// The frequency band `[lower, upper]` covered by one mel filter.
pub fn mel_filter_band(n_filters: usize, index: usize) -> (f64, f64) {
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let mel_lo = hz_to_mel(0.0);
    let mel_hi = hz_to_mel(nyquist);
    let edge = |i: usize| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_filters + 1) as f64);
    (edge(index), edge(index + 2))
}

fn frame_samples(pre: &[f64], start: usize, len: usize) -> Vec<f64> {
    let n = pre.len();
    (0..len)
        .map(|k| {
            let idx = start + k;
            if idx < n {
                pre[idx]
            } else {
                // Reflect around the last sample.
                let over = idx - n + 1;
                pre[n - 1 - over.min(n - 1)]
            }
        })
        .collect()
}

/// Log-mel filter energies per sub-window, shape `T x mel_filters`.
pub fn log_mel_energies(chunk: &AudioChunk, config: &MfccConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let n_fft = config.window_len;
    let mut pre = chunk.samples.clone();
    for i in (1..pre.len()).rev() {
        pre[i] -= config.pre_emphasis * pre[i - 1];
    }
    let window: Vec<f64> = (0..n_fft)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / n_fft as f64).cos())
        .collect();
    let fb = mel_filterbank(config.mel_filters, n_fft);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;
    let mut out = Array2::<f64>::zeros((config.sub_windows, config.mel_filters));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..config.sub_windows {
        let frame = frame_samples(&pre, t * config.hop, n_fft);
        for (b, (&s, &w)) in buf.iter_mut().zip(frame.iter().zip(window.iter())) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        for m in 0..config.mel_filters {
            let e: f64 = fb.row(m).iter().zip(power.iter()).map(|(w, p)| w * p).sum();
            out[(t, m)] = e.max(LOG_FLOOR).ln();
        }
    }
    Ok(out)
}

fn dct_ii_orthonormal(row: &[f64], n_keep: usize) -> Vec<f64> {
    let m = row.len() as f64;
    (0..n_keep)
        .map(|k| {
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            let s: f64 = row
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    v * (std::f64::consts::PI * k as f64 * (2 * j + 1) as f64 / (2.0 * m)).cos()
                })
                .sum();
            scale * s
        })
        .collect()
}

fn regression_delta(series: &Array2<f64>, width: usize) -> Array2<f64> {
    let (t_len, c_len) = series.dim();
    let denom: f64 = 2.0 * (1..=width).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = Array2::<f64>::zeros((t_len, c_len));
    let clamp = |t: isize| -> usize { t.clamp(0, t_len as isize - 1) as usize };
    for t in 0..t_len {
        for c in 0..c_len {
            let mut acc = 0.0;
            for n in 1..=width {
                let fwd = series[(clamp(t as isize + n as isize), c)];
                let bwd = series[(clamp(t as isize - n as isize), c)];
                acc += n as f64 * (fwd - bwd);
            }
            out[(t, c)] = acc / denom;
        }
    }
    out
}

/// Full MFCC feature extraction: static coefficients plus regression
/// derivatives, shape `T x coefficients x 3`.
pub fn mfcc(chunk: &AudioChunk, config: &MfccConfig) -> Result<MfccTensor> {
    let logmel = log_mel_energies(chunk, config)?;
    let mut stat = Array2::<f64>::zeros((config.sub_windows, config.coefficients));
    for (t, row) in logmel.rows().into_iter().enumerate() {
        let c = dct_ii_orthonormal(row.as_slice().unwrap(), config.coefficients);
        for (k, v) in c.into_iter().enumerate() {
            stat[(t, k)] = v;
        }
    }
    let d1 = regression_delta(&stat, config.delta_width);
    let d2 = regression_delta(&d1, config.delta_width);
    let mut values = Array3::<f64>::zeros((config.sub_windows, config.coefficients, 3));
    for t in 0..config.sub_windows {
        for k in 0..config.coefficients {
            values[(t, k, 0)] = stat[(t, k)];
            values[(t, k, 1)] = d1[(t, k)];
            values[(t, k, 2)] = d2[(t, k)];
        }
    }
    Ok(MfccTensor { values })
}
