//! Deterministic parameter initializers.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// Truncated normal: resample anything beyond two standard deviations.
pub fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<T> {
    let dist = Normal::new(0.0f64, std).expect("std > 0");
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = dist.sample(rng);
        while v.abs() > 2.0 * std {
            v = dist.sample(rng);
        }
        data.push(T::from_f64_c(v));
    }
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// He-style normal init for conv / linear weights: std = sqrt(2 / fan_in).
pub fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0f64, std).expect("std > 0");
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64_c(dist.sample(rng))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Uniform init in [-a, a].
pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> ArrayD<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64_c(rng.gen_range(-a..a))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}
