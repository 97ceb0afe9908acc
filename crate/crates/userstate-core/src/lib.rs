//! Semi-supervised multimodal user-state classification.
//!
//! This crate implements the full training and evaluation stack for a
//! four-way user-state classifier (agreement, disagreement, confusion,
//! neutral) driven by two input modalities: quantized audio latents and
//! 3D face landmark trajectories. The pieces:
//!
//! - [`nn`]: a small reverse-mode autodiff engine over `ndarray` with the
//!   layers needed here (convolution, batch norm, pooling, dense) and an
//!   SGD optimizer with cosine learning-rate decay.
//! - [`data`]: clip tensors, labels, manifests, binary clip storage,
//!   fold splitting and batch iteration.
//! - [`face`]: landmark clip normalization (rotation alignment plus
//!   per-frame min-max scaling).
//! - [`audio`]: MFCC frontend turning fixed-length waveform chunks into
//!   coefficient/delta feature blocks.
//! - [`codec`]: a vector-quantized convolutional autoencoder over MFCC
//!   blocks whose bottleneck provides the audio latent clips.
//! - [`backbone`]: wide residual classifiers with multi-scale residual
//!   blocks, one per modality plus a fusion head over concatenated
//!   penultimate features.
//! - [`augment`]: weak shift augmentation and a strong randomized
//!   augmentation policy for consistency training.
//! - [`trainer`]: the combined semi-supervised objective (supervised,
//!   consistency and fusion terms) with confidence-based pseudo-labels
//!   and distilled unlabeled pools.
//! - [`eval`]: per-class F1, confusion matrices and cross-validation.
//! - [`synth`]: synthetic clip generators for desk-scale verification.

pub mod audio;
pub mod augment;
pub mod backbone;
pub mod codec;
pub mod data;
pub mod eval;
pub mod face;
pub mod nn;
pub mod synth;
pub mod trainer;
pub mod util;
