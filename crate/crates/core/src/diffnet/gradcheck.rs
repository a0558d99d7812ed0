use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Draws `count` distinct coordinates of a θ of length `len` (all of them if
/// `count >= len`), sorted.
pub fn sample_coords(len: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, len, count).into_vec();
    idx.sort_unstable();
    idx
}

/// Largest `|analytic − central| / (|central| + 1e-8)` over `coords`, where
/// `central` is the central difference of `loss_at` with step `step`.
pub fn grad_check<F>(theta: &[f64], analytic: &[f64], coords: &[usize], step: f64, mut loss_at: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != theta.len() {
        return Err(Error::shape("grad_check", "analytic gradient length differs from θ"));
    }
    let mut t = theta.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = t[i];
        t[i] = orig + step;
        let up = loss_at(&t)?;
        t[i] = orig - step;
        let down = loss_at(&t)?;
        t[i] = orig;
        let central = (up - down) / (2.0 * step);
        let rel = (analytic[i] - central).abs() / (central.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
