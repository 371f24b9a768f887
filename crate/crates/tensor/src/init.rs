//! Seeded initializers. All sampling draws f64 from a ChaCha8 stream and
//! casts down, so f32 and f64 models built from the same seed agree to
//! rounding.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::of_f64(z * std)
        })
        .collect();
    Tensor::from_raw(shape.to_vec(), data)
}

pub fn uniform<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> Result<Tensor<T>, TensorError> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(TensorError::InvalidArgument(format!(
            "uniform: invalid range [{lo}, {hi})"
        )));
    }
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::of_f64(rng.gen_range(lo..hi))).collect();
    Ok(Tensor::from_raw(shape.to_vec(), data))
}

/// He-style fan-in scaling for layers followed by a leaky rectifier.
pub fn kaiming<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    randn(rng, shape, std)
}
