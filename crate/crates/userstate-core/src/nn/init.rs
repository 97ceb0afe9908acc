//! Parameter initialization helpers.

use ndarray::ArrayD;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Fan-in scaled normal initialization for convolution and dense weights.
pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_simple_fn(shape.to_vec(), || dist.sample(rng))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(shape.to_vec())
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(shape.to_vec())
}
