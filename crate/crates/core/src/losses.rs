//! Training objectives: triplet recovery, cipher uniformity and
//! decorrelation, and their weighted total.

use std::sync::Arc;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::numerics::{Ops, Real};

pub const TRIPLET_MARGIN: f64 = 1.0;
pub const DEFAULT_CORR_PAIRS: usize = 5000;

/// `lambda_cipher * L_cipher + lambda_recovery * L_triplet`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cipher: f64,
    pub recovery: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cipher: 5.0,
            recovery: 5.0,
        }
    }
}

impl LossWeights {
    pub fn check(&self) -> Result<()> {
        if !(self.cipher >= 0.0 && self.recovery >= 0.0 && self.cipher.is_finite() && self.recovery.is_finite()) {
            return invalid(format!("loss weights must be finite and non-negative, got {self:?}"));
        }
        Ok(())
    }

    pub fn combine(&self, cipher: f64, triplet: f64) -> f64 {
        self.cipher * cipher + self.recovery * triplet
    }
}

pub fn mse<T: Real, O: Ops<T>>(ops: &mut O, a: &O::V, b: &O::V) -> Result<O::V> {
    ops.mse(a, b)
}

/// `max(0, mse(anchor, positive) - mse(anchor, negative) + 1)`.
pub fn triplet_recover_loss<T: Real, O: Ops<T>>(
    ops: &mut O,
    anchor: &O::V,
    positive: &O::V,
    negative: &O::V,
) -> Result<O::V> {
    let pos = ops.mse(anchor, positive)?;
    let neg = ops.mse(anchor, negative)?;
    let gap = ops.sub(&pos, &neg)?;
    let shifted = ops.add_scalar(&gap, T::lit(TRIPLET_MARGIN));
    Ok(ops.leaky_relu(&shifted, T::zero()))
}

/// KL divergence from the uniform 256-level law to the soft histogram of a
/// `[0, 1]` rendering, pooled over channels.
pub fn uniform_hist_loss<T: Real, O: Ops<T>>(ops: &mut O, rendering: &O::V) -> Result<O::V> {
    ops.soft_hist_kl(rendering)
}

/// `num_pairs` flat-index pairs of neighbours in a `C x H x W` tensor, each
/// with a random channel, position and direction (horizontal, vertical or
/// diagonal).
pub fn sample_adjacent_pairs(shape: &[usize], num_pairs: usize, rng: &mut impl Rng) -> Result<Arc<[(u32, u32)]>> {
    let &[c, h, w] = shape else {
        return invalid(format!("expected a C x H x W tensor, got {shape:?}"));
    };
    if c == 0 || h < 2 || w < 2 {
        return invalid(format!("{c}x{h}x{w} is too small for adjacent pairs"));
    }
    if num_pairs < 2 {
        return invalid("correlation needs at least two pairs");
    }
    if c * h * w > u32::MAX as usize {
        return invalid("tensor too large for pair indices");
    }
    let pairs = (0..num_pairs)
        .map(|_| {
            let ch = rng.gen_range(0..c);
            let (dy, dx) = match rng.gen_range(0..3) {
                0 => (0, 1),
                1 => (1, 0),
                _ => (1, 1),
            };
            let y = rng.gen_range(0..h - dy);
            let x = rng.gen_range(0..w - dx);
            let at = |y: usize, x: usize| (ch * h * w + y * w + x) as u32;
            (at(y, x), at(y + dy, x + dx))
        })
        .collect();
    Ok(pairs)
}

/// `|rho|` over sampled adjacent pairs; 0 when either side has no variance.
pub fn corr_loss<T: Real, O: Ops<T>>(ops: &mut O, x: &O::V, num_pairs: usize, rng: &mut impl Rng) -> Result<O::V> {
    let pairs = sample_adjacent_pairs(ops.value(x).shape(), num_pairs, rng)?;
    ops.abs_pair_corr(x, &pairs)
}

/// Uniformity plus decorrelation of one `[0, 1]` rendering.
pub fn cipher_loss<T: Real, O: Ops<T>>(
    ops: &mut O,
    rendering: &O::V,
    num_pairs: usize,
    rng: &mut impl Rng,
) -> Result<O::V> {
    let u = uniform_hist_loss(ops, rendering)?;
    let c = corr_loss(ops, rendering, num_pairs, rng)?;
    ops.add(&u, &c)
}

/// The weighted objective and its two components.
#[derive(Clone, Debug)]
pub struct LossTerms<V> {
    pub total: V,
    pub cipher: V,
    pub triplet: V,
}

pub fn weighted_total<T: Real, O: Ops<T>>(
    ops: &mut O,
    cipher: &O::V,
    triplet: &O::V,
    weights: &LossWeights,
) -> Result<O::V> {
    weights.check()?;
    let a = ops.scale(cipher, T::lit(weights.cipher));
    let b = ops.scale(triplet, T::lit(weights.recovery));
    ops.add(&a, &b)
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real, O: Ops<T>>(
    ops: &mut O,
    rendering: &O::V,
    anchor: &O::V,
    positive: &O::V,
    negative: &O::V,
    weights: &LossWeights,
    num_pairs: usize,
    rng: &mut impl Rng,
) -> Result<LossTerms<O::V>> {
    let cipher = cipher_loss(ops, rendering, num_pairs, rng)?;
    let triplet = triplet_recover_loss(ops, anchor, positive, negative)?;
    let total = weighted_total(ops, &cipher, &triplet, weights)?;
    Ok(LossTerms { total, cipher, triplet })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::Error;
    use crate::numerics::{finite_difference_check, Eager, Tape, Tensor};

    fn t(shape: &[usize], v: f64) -> Tensor<f64> {
        Tensor::full(shape, v)
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen::<f64>())
    }

    /// Tensors whose MSE from the zero anchor is exactly `m`.
    fn at_mse(m: f64) -> Tensor<f64> {
        t(&[1, 2, 2], m.sqrt())
    }

    fn scalar(v: Tensor<f64>) -> f64 {
        v.item()
    }

    #[test]
    fn mse_cases() {
        let a = t(&[3, 4, 4], 0.0);
        assert_eq!(scalar(mse(&mut Eager, &a, &a).unwrap()), 0.0);
        assert!((scalar(mse(&mut Eager, &a, &t(&[3, 4, 4], 0.5)).unwrap()) - 0.25).abs() < 1e-12);
        let (x, y) = (rand_t(&[3, 5, 5], 1), rand_t(&[3, 5, 5], 2));
        let mut s = 0.0;
        for i in 0..x.len() {
            s += (x.data()[i] - y.data()[i]) * (x.data()[i] - y.data()[i]);
        }
        assert!((scalar(mse(&mut Eager, &x, &y).unwrap()) - s / x.len() as f64).abs() < 1e-7);
        assert!(matches!(mse(&mut Eager, &x, &t(&[3, 5, 4], 0.0)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn triplet_hinge_cases() {
        let anchor = t(&[1, 2, 2], 0.0);
        let l = triplet_recover_loss(&mut Eager, &anchor, &anchor, &at_mse(2.0)).unwrap();
        assert!(scalar(l).abs() < 1e-6);
        let p = rand_t(&[1, 2, 2], 3);
        let l = triplet_recover_loss(&mut Eager, &anchor, &p, &p).unwrap();
        assert!((scalar(l) - 1.0).abs() < 1e-6);
        let l = triplet_recover_loss(&mut Eager, &anchor, &at_mse(0.5), &at_mse(0.2)).unwrap();
        assert!((scalar(l) - 1.3).abs() < 1e-6);
        assert!(triplet_recover_loss(&mut Eager, &anchor, &t(&[1, 2, 3], 0.0), &p).is_err());
    }

    #[test]
    fn hinge_is_flat_when_satisfied() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 2, 2], 0.0));
        let p = tape.leaf(at_mse(0.1));
        let n = tape.leaf(at_mse(3.0));
        let l = triplet_recover_loss(&mut tape, &a, &p, &n).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(p).map_or(true, |g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn uniform_hist_cases() {
        let uniform = Tensor::from_fn(&[1, 16, 16], |i| i as f64 / 255.0);
        assert!(scalar(uniform_hist_loss(&mut Eager, &uniform).unwrap()).abs() < 1e-6);
        let point = t(&[3, 4, 4], 1.0);
        assert!((scalar(uniform_hist_loss(&mut Eager, &point).unwrap()) - 256f64.ln()).abs() < 1e-6);
        assert!(uniform_hist_loss(&mut Eager, &Tensor::<f64>::zeros(&[0])).is_err());
        for seed in 0..20 {
            assert!(scalar(uniform_hist_loss(&mut Eager, &rand_t(&[3, 8, 8], seed)).unwrap()) >= 0.0);
        }
    }

    #[test]
    fn uniform_hist_decreases_along_homotopy() {
        let dither = Tensor::from_fn(&[1, 32, 32], |i| (i % 256) as f64 / 255.0);
        let mut last = f64::INFINITY;
        for step in 0..5 {
            let s = step as f64 / 4.0;
            let x = dither.map(|u| (1.0 - s) * 0.5 + s * u);
            let l = scalar(uniform_hist_loss(&mut Eager, &x).unwrap());
            assert!(l < last, "step {step}: {l} !< {last}");
            last = l;
        }
        assert!(last.abs() < 1e-6);
    }

    #[test]
    fn corr_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flat = t(&[3, 8, 8], 0.4);
        assert_eq!(scalar(corr_loss(&mut Eager, &flat, 100, &mut rng).unwrap()), 0.0);
        let noise = rand_t(&[1, 128, 128], 5);
        assert!(scalar(corr_loss(&mut Eager, &noise, DEFAULT_CORR_PAIRS, &mut rng).unwrap()) < 0.05);
        let ramp = Tensor::from_fn(&[1, 16, 16], |i| (i / 16 + i % 16) as f64);
        assert!(scalar(corr_loss(&mut Eager, &ramp, 500, &mut rng).unwrap()) > 0.9);
        assert!(corr_loss(&mut Eager, &t(&[1, 1, 8], 0.0), 10, &mut rng).is_err());
        assert!(corr_loss(&mut Eager, &noise, 1, &mut rng).is_err());
    }

    #[test]
    fn duplicated_signal_correlates_perfectly() {
        let x = rand_t(&[1, 1, 50], 6);
        let d: Vec<f64> = x.data().iter().chain(x.data()).copied().collect();
        let dup = Tensor::new(vec![1, 1, 100], d).unwrap();
        let pairs: Arc<[(u32, u32)]> = (0..50).map(|i| (i, i + 50)).collect();
        let r = scalar(Eager.abs_pair_corr(&dup, &pairs).unwrap());
        assert!((r - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pairs_are_adjacent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h, w) = (3, 5, 7);
        let pairs = sample_adjacent_pairs(&[c, h, w], 2000, &mut rng).unwrap();
        let mut dirs = [0usize; 3];
        for &(a, b) in pairs.iter() {
            let (a, b) = (a as usize, b as usize);
            assert_eq!(a / (h * w), b / (h * w));
            let (ya, xa) = ((a % (h * w)) / w, a % w);
            let (yb, xb) = ((b % (h * w)) / w, b % w);
            match (yb - ya, xb as isize - xa as isize) {
                (0, 1) => dirs[0] += 1,
                (1, 0) => dirs[1] += 1,
                (1, 1) => dirs[2] += 1,
                d => panic!("not adjacent: {d:?}"),
            }
        }
        assert!(dirs.iter().all(|&n| n > 500));
    }

    #[test]
    fn corr_is_affine_invariant() {
        let x = rand_t(&[2, 16, 16], 8);
        let y = x.map(|v| -3.5 * v + 7.0);
        let mut r1 = ChaCha8Rng::seed_from_u64(2);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = scalar(corr_loss(&mut Eager, &x, 800, &mut r1).unwrap());
        let b = scalar(corr_loss(&mut Eager, &y, 800, &mut r2).unwrap());
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn cipher_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let point = t(&[3, 8, 8], 0.0);
        let l = scalar(cipher_loss(&mut Eager, &point, 500, &mut rng).unwrap());
        assert!((l - 256f64.ln()).abs() < 1e-6);
        // Every level equally often, in a scrambled order.
        let mut levels: Vec<f64> = (0..3 * 64 * 64).map(|i| (i % 256) as f64 / 255.0).collect();
        rand::seq::SliceRandom::shuffle(levels.as_mut_slice(), &mut rng);
        let uni = Tensor::new(vec![3, 64, 64], levels).unwrap();
        let l = scalar(cipher_loss(&mut Eager, &uni, DEFAULT_CORR_PAIRS, &mut rng).unwrap());
        assert!((0.0..0.05).contains(&l), "{l}");
    }

    #[test]
    fn weighted_totals() {
        let c = Tensor::scalar(0.2f64);
        let tr = Tensor::scalar(1.3f64);
        let w = |a, b| LossWeights { cipher: a, recovery: b };
        assert!((scalar(weighted_total(&mut Eager, &c, &tr, &LossWeights::default()).unwrap()) - 7.5).abs() < 1e-12);
        assert_eq!(scalar(weighted_total(&mut Eager, &c, &tr, &w(0.0, 1.0)).unwrap()), 1.3);
        assert_eq!(scalar(weighted_total(&mut Eager, &c, &tr, &w(1.0, 0.0)).unwrap()), 0.2);
        assert!(weighted_total(&mut Eager, &c, &tr, &w(-1.0, 0.0)).is_err());
        assert!((LossWeights::default().combine(0.2, 1.3) - 7.5).abs() < 1e-12);
    }

    fn grad_err(x: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
        let shape = x.shape().to_vec();
        let eval = |xs: &[f64]| {
            let mut tp = Tape::new();
            let v = tp.leaf(Tensor::new(shape.clone(), xs.to_vec()).unwrap());
            let l = f(&mut tp, v);
            tp.get(l).item()
        };
        let mut tp = Tape::new();
        let v = tp.leaf(x.clone());
        let l = f(&mut tp, v);
        let g = tp.backward(l).unwrap().wrt(v).unwrap().clone();
        let coords: Vec<usize> = (0..x.len()).collect();
        finite_difference_check(eval, x.data(), g.data(), 1e-6, &coords)
    }

    use crate::numerics::Var;

    #[test]
    fn every_loss_passes_gradient_check() {
        let x = rand_t(&[3, 8, 8], 10).map(|v| 0.02 + 0.96 * v);
        let anchor = rand_t(&[3, 8, 8], 11);
        let other = rand_t(&[3, 8, 8], 12);
        let checks: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, Var) -> Var>)> = vec![
            ("mse", Box::new(|tp, v| { let a = tp.constant(anchor.clone()); mse(tp, &a, &v).unwrap() })),
            ("triplet/pos", Box::new(|tp, v| {
                let a = tp.constant(anchor.clone());
                let n = tp.constant(other.clone());
                triplet_recover_loss(tp, &a, &v, &n).unwrap()
            })),
            ("triplet/neg", Box::new(|tp, v| {
                let a = tp.constant(anchor.clone());
                let p = tp.constant(other.clone());
                triplet_recover_loss(tp, &a, &p, &v).unwrap()
            })),
            ("uniform", Box::new(|tp, v| uniform_hist_loss(tp, &v).unwrap())),
            ("corr", Box::new(|tp, v| corr_loss(tp, &v, 150, &mut ChaCha8Rng::seed_from_u64(1)).unwrap())),
            ("cipher", Box::new(|tp, v| cipher_loss(tp, &v, 150, &mut ChaCha8Rng::seed_from_u64(1)).unwrap())),
            ("total", Box::new(|tp, v| {
                let a = tp.constant(anchor.clone());
                let n = tp.constant(other.clone());
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                total_loss(tp, &v, &a, &v, &n, &LossWeights::default(), 150, &mut rng).unwrap().total
            })),
        ];
        for (name, f) in checks {
            let err = grad_err(&x, f);
            assert!(err <= 1e-3, "{name}: {err}");
        }
    }
}
