//! Deterministic weight initialization.

use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator with a stable stream across platforms.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal via Box-Muller, driven by two uniform draws.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Normal truncated to two standard deviations, rescaled by `std`.
pub fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return T::from_f64(z * std);
        }
    })
}

/// He (fan-in) initialization for convolution stacks followed by ReLU.
pub fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    trunc_normal(rng, shape, std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a: Tensor<f32> = trunc_normal(&mut rng(7), &[32, 32], 0.02);
        let b: Tensor<f32> = trunc_normal(&mut rng(7), &[32, 32], 0.02);
        assert_eq!(a.data(), b.data());
        let c: Tensor<f32> = trunc_normal(&mut rng(8), &[32, 32], 0.02);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn truncated_at_two_sigma() {
        let t: Tensor<f64> = trunc_normal(&mut rng(0), &[4096], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04 + 1e-12));
    }
}
