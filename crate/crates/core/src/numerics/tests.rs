use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels as k;
use super::*;
use crate::error::{Error, Result};

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Pushes values away from zero so kinked ops are differentiable at every sample.
fn away_from_zero(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v })
}

fn direct_conv(input: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (ci, h, wd) = input.dims3().unwrap();
    let co = w.shape()[0];
    let mut out = Tensor::zeros(&[co, h, wd]);
    for o in 0..co {
        for y in 0..h {
            for x in 0..wd {
                let mut s = b.data()[o];
                for c in 0..ci {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (sy, sx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            s += w.data()[((o * ci + c) * 3 + dy) * 3 + dx]
                                * input.data()[(c * h + sy as usize) * wd + sx as usize];
                        }
                    }
                }
                out.data_mut()[(o * h + y) * wd + x] = s;
            }
        }
    }
    out
}

const FD_EPS: f64 = 1e-6;

/// Checks d mse(build(x), target) / dx against central differences at every coordinate.
fn check_input_grad(x: &Tensor<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) -> f64 {
    let shape = x.shape().to_vec();
    let out_shape = {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let o = build(&mut t, v).unwrap();
        t.get(o).shape().to_vec()
    };
    let target = rand_tensor(&out_shape, -1.0, 1.0, 99);
    let eval = |xs: &[f64], want_grad: bool| -> (f64, Option<Tensor<f64>>) {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::new(shape.clone(), xs.to_vec()).unwrap());
        let o = build(&mut t, v).unwrap();
        let tg = t.constant(target.clone());
        let l = t.mse(&o, &tg).unwrap();
        let val = t.get(l).item();
        let g = want_grad.then(|| t.backward(l).unwrap().wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(&shape)));
        (val, g)
    };
    let (_, g) = eval(x.data(), true);
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_difference_check(|p| eval(p, false).0, x.data(), g.unwrap().data(), FD_EPS, &coords)
}

#[test]
fn conv_of_zero_is_bias() {
    let x = Tensor::<f32>::zeros(&[2, 3, 4]);
    let w = Tensor::from_fn(&[3, 2, 3, 3], |i| i as f32 * 0.1);
    let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let y = conv2d(&x, &w, &b).unwrap();
    for o in 0..3 {
        assert!(y.data()[o * 12..(o + 1) * 12].iter().all(|&v| v == b.data()[o]));
    }
}

#[test]
fn conv_identity_kernel() {
    let x = rand_tensor(&[1, 5, 4], -1.0, 1.0, 1).cast::<f32>();
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    w.data_mut()[4] = 1.0;
    let y = conv2d(&x, &w, &Tensor::zeros(&[1])).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_matches_direct_loop() {
    let x = rand_tensor(&[1, 4, 4], -1.0, 1.0, 2);
    let w = rand_tensor(&[1, 1, 3, 3], -1.0, 1.0, 3);
    let b = rand_tensor(&[1], -1.0, 1.0, 4);
    let got = conv2d(&x.cast::<f32>(), &w.cast::<f32>(), &b.cast::<f32>()).unwrap();
    assert!(got.cast::<f64>().max_abs_diff(&direct_conv(&x, &w, &b)) < 1e-6);

    let x = rand_tensor(&[3, 5, 6], -1.0, 1.0, 5);
    let w = rand_tensor(&[4, 3, 3, 3], -1.0, 1.0, 6);
    let b = rand_tensor(&[4], -1.0, 1.0, 7);
    assert!(conv2d(&x, &w, &b).unwrap().max_abs_diff(&direct_conv(&x, &w, &b)) < 1e-12);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let x = Tensor::<f32>::zeros(&[2, 3, 3]);
    let w = Tensor::zeros(&[1, 3, 3, 3]);
    assert!(matches!(conv2d(&x, &w, &Tensor::zeros(&[1])), Err(Error::InvalidArgument(_))));
    let w = Tensor::zeros(&[1, 2, 3, 3]);
    assert!(matches!(conv2d(&x, &w, &Tensor::zeros(&[2])), Err(Error::InvalidArgument(_))));
}

#[test]
fn leaky_relu_cases() {
    let x = Tensor::new(vec![3], vec![1.0f32, -1.0, 0.0]).unwrap();
    assert_eq!(leaky_relu(&x, 0.2).data(), &[1.0, -0.2, 0.0]);
}

#[test]
fn subnet_shapes_and_counts() {
    let p = ConvSubnetParams::<f32>::zeros(32);
    let per_layer: Vec<usize> = p.layers.iter().map(ConvLayer::param_count).collect();
    assert_eq!(per_layer, vec![1184, 10400, 19616, 28832, 3567]);
    assert_eq!(p.param_count(), 63_599);
    assert_eq!(16 * p.param_count(), 1_017_584);

    let x = Tensor::from_fn(&[4, 8, 8], |i| i as f32);
    let y = subnet_forward(&mut Eager, &x, &p, 0.2, 0).unwrap();
    assert_eq!(y.shape(), &[3, 8, 8]);
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert!(matches!(
        subnet_forward(&mut Eager, &Tensor::zeros(&[3, 8, 8]), &p, 0.2, 0),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn subnet_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = ConvSubnetParams::<f32>::random(8, 0.1, 1.0, &mut rng);
    let x = rand_tensor(&[4, 6, 6], 0.0, 1.0, 9).cast::<f32>();
    let a = subnet_forward(&mut Eager, &x, &p, 0.2, 0).unwrap();
    let b = subnet_forward(&mut Eager, &x, &p, 0.2, 0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn tape_square_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.param(0, &Tensor::new(vec![1], vec![3.0]).unwrap());
    let zero = t.constant(Tensor::zeros(&[1]));
    let l = t.mse(&x, &zero).unwrap();
    let g = t.backward(l).unwrap();
    assert!((g.param(0).unwrap().item() - 6.0).abs() < 1e-12);
}

#[test]
fn constant_loss_has_no_gradient() {
    let mut t = Tape::<f64>::new();
    let _p = t.param(0, &Tensor::full(&[2], 1.0));
    let a = t.constant(Tensor::full(&[2], 2.0));
    let b = t.constant(Tensor::full(&[2], 0.0));
    let l = t.mse(&a, &b).unwrap();
    let g = t.backward(l).unwrap();
    assert!(g.param(0).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn opaque_ops_refuse_backward() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::full(&[1, 2, 2], 0.5));
    let y = t.opaque("round", Tensor::full(&[1, 2, 2], 1.0), &[x]);
    let zero = t.constant(Tensor::zeros(&[1, 2, 2]));
    let l = t.mse(&y, &zero).unwrap();
    assert!(matches!(t.backward(l), Err(Error::UnsupportedOperation(_))));
}

#[test]
fn backward_needs_scalar() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::full(&[2], 0.5));
    assert!(matches!(t.backward(x), Err(Error::InvalidArgument(_))));
}

#[test]
fn backward_visits_in_reverse_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = ConvSubnetParams::<f64>::random(4, 0.3, 1.0, &mut rng);
    let mut t = Tape::new();
    let x = t.leaf(rand_tensor(&[4, 4, 4], -1.0, 1.0, 2));
    let y = subnet_forward(&mut t, &x, &p, 0.2, 0).unwrap();
    let z = t.constant(Tensor::zeros(&[3, 4, 4]));
    let l = t.mse(&y, &z).unwrap();
    let g = t.backward(l).unwrap();
    let order = g.visit_order();
    assert!(order.windows(2).all(|w| w[0] > w[1]));
    assert_eq!(order[0], t.len() - 1);
    for (i, layer) in p.layers.iter().enumerate() {
        assert_eq!(g.param(2 * i).unwrap().shape(), layer.weight.shape());
        assert_eq!(g.param(2 * i + 1).unwrap().shape(), layer.bias.shape());
    }
}

#[test]
fn fd_quadratic() {
    let p = vec![1.0f64, -2.0, 0.5];
    let analytic: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
    let err = finite_difference_check(|q| q.iter().map(|v| v * v).sum(), &p, &analytic, DEFAULT_FD_EPS, &[0, 1, 2]);
    assert!(err < 1e-6);
}

#[test]
fn grad_elementwise_primitives() {
    let x = away_from_zero(rand_tensor(&[2, 3, 4], -2.0, 2.0, 10));
    let other = rand_tensor(&[2, 3, 4], -1.0, 1.0, 11);
    let cases: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>)> = vec![
        ("leaky_relu", Box::new(|t, v| Ok(t.leaky_relu(&v, 0.2)))),
        ("sigmoid", Box::new(|t, v| Ok(t.sigmoid(&v)))),
        ("exp", Box::new(|t, v| Ok(t.exp(&v)))),
        ("scale", Box::new(|t, v| Ok(t.scale(&v, -1.7)))),
        ("add_scalar", Box::new(|t, v| Ok(t.add_scalar(&v, 0.3)))),
        ("clamp", Box::new(|t, v| Ok(t.clamp(&v, -1.03, 1.07)))),
        ("add", Box::new(|t, v| { let o = t.constant(other.clone()); t.add(&v, &o) })),
        ("sub", Box::new(|t, v| { let o = t.constant(other.clone()); t.sub(&o, &v) })),
        ("mul", Box::new(|t, v| { let o = t.constant(other.clone()); t.mul(&v, &o) })),
        ("mul_self", Box::new(|t, v| t.mul(&v, &v))),
        ("concat", Box::new(|t, v| { let o = t.constant(other.clone()); t.concat(&[&o, &v, &v]) })),
        ("gather", Box::new(|t, v| {
            let idx: Arc<[u32]> = (0..30u32).map(|i| (i * 7) % 24).collect();
            t.gather(&v, &idx, &[1, 5, 6])
        })),
    ];
    for (name, f) in cases {
        let err = check_input_grad(&x, f);
        assert!(err <= 1e-4, "{name}: {err}");
    }
}

#[test]
fn grad_conv2d_input_and_params() {
    let x = rand_tensor(&[3, 4, 5], -1.0, 1.0, 20);
    let layer = ConvLayer {
        weight: rand_tensor(&[2, 3, 3, 3], -0.5, 0.5, 21),
        bias: rand_tensor(&[2], -0.5, 0.5, 22),
    };
    let err = check_input_grad(&x, |t, v| t.conv2d(&v, &layer, 0));
    assert!(err <= 1e-4, "input: {err}");

    let target = rand_tensor(&[2, 4, 5], -1.0, 1.0, 23);
    let loss = |l: &ConvLayer<f64>| -> (f64, Grads<f64>) {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = t.conv2d(&xv, l, 0).unwrap();
        let tg = t.constant(target.clone());
        let m = t.mse(&y, &tg).unwrap();
        (t.get(m).item(), t.backward(m).unwrap())
    };
    let (_, g) = loss(&layer);
    for (id, base) in [(0usize, &layer.weight), (1, &layer.bias)] {
        let analytic = g.param(id).unwrap().clone();
        let coords: Vec<usize> = (0..base.len()).collect();
        let err = finite_difference_check(
            |p| {
                let mut l = layer.clone();
                let t = if id == 0 { &mut l.weight } else { &mut l.bias };
                t.data_mut().copy_from_slice(p);
                loss(&l).0
            },
            base.data(),
            analytic.data(),
            FD_EPS,
            &coords,
        );
        assert!(err <= 1e-4, "param {id}: {err}");
    }
}

#[test]
fn grad_reductions() {
    let x = rand_tensor(&[1, 6, 6], 0.05, 0.95, 30);
    // Faithful to the op: no head, the reduction itself is the loss.
    let direct = |f: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var>| -> f64 {
        let shape = x.shape().to_vec();
        let eval = |xs: &[f64]| {
            let mut t = Tape::new();
            let v = t.leaf(Tensor::new(shape.clone(), xs.to_vec()).unwrap());
            let l = f(&mut t, v).unwrap();
            t.get(l).item()
        };
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let l = f(&mut t, v).unwrap();
        let g = t.backward(l).unwrap().wrt(v).unwrap().clone();
        let coords: Vec<usize> = (0..x.len()).collect();
        finite_difference_check(eval, x.data(), g.data(), FD_EPS, &coords)
    };
    let target = rand_tensor(&[1, 6, 6], 0.0, 1.0, 31);
    let err = direct(&|t, v| {
        let tg = t.constant(target.clone());
        t.mse(&v, &tg)
    });
    assert!(err <= 1e-4, "mse {err}");
    let err = direct(&|t, v| t.soft_hist_kl(&v));
    assert!(err <= 1e-4, "kl {err}");
    let pairs: Arc<[(u32, u32)]> = (0..30u32).map(|i| (i, i + 1)).collect();
    let err = direct(&|t, v| t.abs_pair_corr(&v, &pairs));
    assert!(err <= 1e-4, "corr {err}");
}

#[test]
fn grad_minmax_normalize() {
    let x = rand_tensor(&[2, 3, 3], -3.0, 5.0, 40);
    let err = check_input_grad(&x, |t, v| t.minmax_normalize(&v));
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn grad_noise_primitives() {
    let x = rand_tensor(&[3, 8, 9], -1.0, 2.0, 50);
    let taps: Arc<[f64]> = k::gaussian_taps(0.8).into();
    assert!(check_input_grad(&x, |t, v| t.blur(&v, &taps)) <= 1e-4);

    let mut keep = [false; 64];
    for &i in &k::zigzag_order()[..20] {
        keep[i] = true;
    }
    assert!(check_input_grad(&x, |t, v| t.dct_mask(&v, &keep)) <= 1e-4);

    let hits: Arc<[(u32, bool)]> = vec![(0, true), (5, false), (17, true), (40, false)].into();
    assert!(check_input_grad(&x, |t, v| t.salt_pepper(&v, &hits)) <= 1e-4);

    let z = rand_tensor(&[3, 8, 9], -1.0, 1.0, 51);
    assert!(check_input_grad(&x, |t, v| t.range_noise(&v, z.clone(), 0.05)) <= 1e-4);
}

#[test]
fn median_gradient_is_straight_through() {
    let x = rand_tensor(&[3, 5, 5], 0.0, 1.0, 60);
    let target = rand_tensor(&[3, 5, 5], 0.0, 1.0, 61);
    let mut t = Tape::new();
    let v = t.leaf(x.clone());
    let m = t.median_straight_through(&v, 3).unwrap();
    assert_eq!(t.get(m), &k::median_blur(&x, 3).unwrap());
    let tg = t.constant(target.clone());
    let l = t.mse(&m, &tg).unwrap();
    let g = t.backward(l).unwrap().wrt(v).unwrap().clone();
    let n = x.len() as f64;
    let want = t.get(m).zip_map(&target, |a, b| 2.0 * (a - b) / n).unwrap();
    assert!(g.max_abs_diff(&want) < 1e-12);
}

#[test]
fn grad_subnet_with_mse_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let p = ConvSubnetParams::<f64>::random(4, 0.3, 1.0, &mut rng);
    let x = rand_tensor(&[4, 4, 4], -1.0, 1.0, 71);
    let target = rand_tensor(&[3, 4, 4], -1.0, 1.0, 72);
    let run = |p: &ConvSubnetParams<f64>| -> (f64, Grads<f64>) {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = subnet_forward(&mut t, &xv, p, 0.2, 0).unwrap();
        let tg = t.constant(target.clone());
        let l = t.mse(&y, &tg).unwrap();
        (t.get(l).item(), t.backward(l).unwrap())
    };
    let (_, g) = run(&p);
    let flat = |p: &ConvSubnetParams<f64>| -> Vec<f64> {
        p.layers.iter().flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied()).collect()
    };
    let unflat = |v: &[f64]| {
        let mut q = p.clone();
        let mut o = 0;
        for l in &mut q.layers {
            for t in [&mut l.weight, &mut l.bias] {
                let n = t.len();
                t.data_mut().copy_from_slice(&v[o..o + n]);
                o += n;
            }
        }
        q
    };
    let analytic: Vec<f64> = (0..p.layers.len())
        .flat_map(|i| {
            let w = g.param(2 * i).unwrap().data().to_vec();
            let b = g.param(2 * i + 1).unwrap().data().to_vec();
            w.into_iter().chain(b)
        })
        .collect();
    let theta = flat(&p);
    let coords = sample_coords(theta.len(), 300, 73);
    let err = finite_difference_check(|v| run(&unflat(v)).0, &theta, &analytic, FD_EPS, &coords);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn conv_is_linear() {
    let w = rand_tensor(&[2, 3, 3, 3], -1.0, 1.0, 80).cast::<f32>();
    let zero = Tensor::zeros(&[2]);
    let x = rand_tensor(&[3, 5, 5], -1.0, 1.0, 81).cast::<f32>();
    let y = rand_tensor(&[3, 5, 5], -1.0, 1.0, 82).cast::<f32>();
    let (a, b) = (0.7f32, -1.3f32);
    let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
    let lhs = conv2d(&mix, &w, &zero).unwrap();
    let cx = conv2d(&x, &w, &zero).unwrap();
    let cy = conv2d(&y, &w, &zero).unwrap();
    let rhs = cx.zip_map(&cy, |p, q| a * p + b * q).unwrap();
    assert!(lhs.max_abs_diff(&rhs) < 1e-5);
}

proptest! {
    #[test]
    fn conv_oracle_agrees(ci in 1usize..4, co in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = rand_tensor(&[ci, h, w], -1.0, 1.0, seed);
        let wt = rand_tensor(&[co, ci, 3, 3], -1.0, 1.0, seed ^ 1);
        let b = rand_tensor(&[co], -1.0, 1.0, seed ^ 2);
        prop_assert!(conv2d(&x, &wt, &b).unwrap().max_abs_diff(&direct_conv(&x, &wt, &b)) < 1e-10);
    }

    #[test]
    fn blur_backward_is_adjoint(h in 1usize..10, w in 1usize..10, sigma in 0.3f64..2.0, seed in any::<u64>()) {
        let taps = k::gaussian_taps(sigma);
        let x = rand_tensor(&[2, h, w], -1.0, 1.0, seed);
        let g = rand_tensor(&[2, h, w], -1.0, 1.0, seed ^ 3);
        let ax = k::gaussian_blur(&x, &taps).unwrap();
        let atg = k::gaussian_blur_backward(&g, &taps).unwrap();
        let lhs: f64 = ax.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(atg.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }
}

#[test]
fn gaussian_taps_shape() {
    let t = k::gaussian_taps(1.0);
    assert_eq!(t.len(), 7);
    assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(k::gaussian_taps(0.5).len(), 5);
}

#[test]
fn dct_keep_all_is_identity() {
    let x = rand_tensor(&[1, 16, 10], -1.0, 1.0, 90);
    assert!(k::dct_mask(&x, &[true; 64]).unwrap().max_abs_diff(&x) < 1e-12);
    let mut only_dc = [false; 64];
    only_dc[0] = true;
    let y = k::dct_mask(&x, &only_dc).unwrap();
    let block_mean: f64 = (0..8).flat_map(|r| (0..8).map(move |c| r * 10 + c)).map(|i| x.data()[i]).sum::<f64>() / 64.0;
    assert!((y.data()[0] - block_mean).abs() < 1e-12);
    assert_eq!(y.data()[8], x.data()[8]);
}

#[test]
fn zigzag_starts_correctly() {
    assert_eq!(&k::zigzag_order()[..6], &[0, 1, 8, 16, 9, 2]);
}

#[test]
fn histogram_extremes() {
    let uniform = Tensor::from_fn(&[1, 1, 256 * 4], |i| (i % 256) as f64 / 255.0);
    assert!(k::soft_hist_kl(&uniform).unwrap().abs() < 1e-6);
    let point = Tensor::full(&[1, 4, 4], 0.0);
    assert!((k::soft_hist_kl(&point).unwrap() - 256f64.ln()).abs() < 1e-6);
}

#[test]
fn correlation_of_duplicates_is_one() {
    let x = rand_tensor(&[1, 1, 20], 0.0, 1.0, 95);
    let d: Vec<f64> = x.data().iter().chain(x.data()).copied().collect();
    let t = Tensor::new(vec![1, 1, 40], d).unwrap();
    let pairs: Vec<(u32, u32)> = (0..20).map(|i| (i, i + 20)).collect();
    assert!((k::pair_correlation(&t, &pairs).unwrap() - 1.0).abs() < 1e-12);
    let flat = Tensor::full(&[1, 1, 40], 0.3);
    assert_eq!(k::pair_correlation(&flat, &pairs).unwrap(), 0.0);
}
