//! Shared helpers for unit tests: central finite differences and seeded
//! random vectors. Test-only; not part of the public API.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

/// Central finite differences of a scalar function at `theta`.
pub fn finite_difference<Ff>(f: &Ff, theta: &[f64], h: f64) -> Vec<f64>
where
    Ff: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; theta.len()];
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = f(&probe);
        probe[i] = theta[i] - h;
        let down = f(&probe);
        probe[i] = theta[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}
