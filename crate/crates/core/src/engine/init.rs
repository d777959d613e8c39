use rand::Rng;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::seed;

/// `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Samples a tensor uniformly on `[-bound, bound]` with the Glorot bound.
pub fn glorot_uniform<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, seed: u64) -> Tensor<T> {
    let bound = glorot_bound(fan_in, fan_out);
    let mut rng = seed::rng(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}
