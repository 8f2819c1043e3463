use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default truncation half-width, in standard deviations.
pub const DEFAULT_TRUNCATION: f64 = 2.0;

/// Samples `N(0, sd²)` rejected outside `±bound·sd`, seeded.
pub fn truncated_normal(shape: &[usize], sd: f64, bound: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    truncated_normal_with(shape, sd, bound, &mut rng)
}

pub fn truncated_normal_with<R: Rng + ?Sized>(
    shape: &[usize],
    sd: f64,
    bound: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(Error::contract(format!(
            "init sd must be positive, got {sd}"
        )));
    }
    if !(bound > 0.0) {
        return Err(Error::contract(format!(
            "truncation bound must be positive, got {bound}"
        )));
    }
    let normal = Normal::new(0.0, sd).expect("sd validated");
    let limit = bound * sd;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= limit {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}
