use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Element, Tensor};

/// Samples `N(0, std^2)` in f64 and casts, so f32 and f64 parameter sets drawn
/// from the same seed agree up to rounding.
pub(crate) fn normal<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(dist.sample(rng)))
}

/// Kaiming-uniform for relu fan-in: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub(crate) fn kaiming_uniform<T: Element>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| {
        T::from_f64_lossy(rng.random_range(-bound..bound))
    })
}
