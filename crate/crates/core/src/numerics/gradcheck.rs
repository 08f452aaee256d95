use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Real;

pub const DEFAULT_FD_EPS: f64 = 1e-3;

/// Largest relative disagreement between `analytic` and central differences
/// of `loss` over the coordinates in `coords`:
/// `|a - (f(p + e) - f(p - e)) / 2e| / (|a| + 1e-8)`.
pub fn finite_difference_check<T: Real>(
    mut loss: impl FnMut(&[T]) -> f64,
    params: &[T],
    analytic: &[T],
    eps: f64,
    coords: &[usize],
) -> f64 {
    assert!(eps > 0.0, "finite-difference step must be positive");
    assert_eq!(params.len(), analytic.len());
    let mut theta = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = theta[i];
        theta[i] = T::lit(orig.f64() + eps);
        let up = loss(&theta);
        theta[i] = T::lit(orig.f64() - eps);
        let down = loss(&theta);
        theta[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i].f64();
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
    }
    worst
}

/// Up to `count` distinct coordinates out of `n`, reproducible from `seed`.
pub fn sample_coords(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, n, count.min(n)).into_vec();
    v.sort_unstable();
    v
}
