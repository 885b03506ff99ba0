use lsdfn::checks::gradcheck_conv;
use lsdfn::conv::{conv2d, conv2d_backward};
use lsdfn::rng::{gaussian_fill, Rng};
use lsdfn::Tensor;
use proptest::prelude::*;

/// Six nested loops, zero padding by bounds checks.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let (n, c_in, h, wd) = x.dims4().unwrap();
    let (c_out, _, k, _) = w.dims4().unwrap();
    let mut out = Tensor::zeros(&[n, c_out, h, wd]).unwrap();
    for bn in 0..n {
        for o in 0..c_out {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.at(&[o]);
                    for c in 0..c_in {
                        for j in 0..k {
                            for i in 0..k {
                                let iy = y as isize + j as isize - pad as isize;
                                let ix = xx as isize + i as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(&[bn, c, iy as usize, ix as usize]) * w.at(&[o, c, j, i]);
                                }
                            }
                        }
                    }
                    out.set(&[bn, o, y, xx], acc);
                }
            }
        }
    }
    out
}

#[test]
fn matches_direct_loop_oracle() {
    let x = gaussian_fill::<f64>(&[2, 3, 8, 8], 1, 0.0, 1.0).unwrap();
    let w = gaussian_fill::<f64>(&[4, 3, 3, 3], 2, 0.0, 1.0).unwrap();
    let b = gaussian_fill::<f64>(&[4], 3, 0.0, 1.0).unwrap();
    let fast = conv2d(&x, &w, &b, 1).unwrap();
    let slow = conv_oracle(&x, &w, &b, 1);
    assert!(fast.relative_error(&slow).unwrap() <= 1e-6);
}

#[test]
fn single_precision_matches_oracle() {
    let x = gaussian_fill::<f64>(&[1, 5, 9, 7], 4, 0.0, 1.0).unwrap();
    let w = gaussian_fill::<f64>(&[3, 5, 5, 5], 5, 0.0, 1.0).unwrap();
    let b = gaussian_fill::<f64>(&[3], 6, 0.0, 1.0).unwrap();
    let fast = conv2d(&x.cast::<f32>(), &w.cast(), &b.cast(), 2).unwrap().cast::<f64>();
    assert!(fast.relative_error(&conv_oracle(&x, &w, &b, 2)).unwrap() <= 1e-6);
}

#[test]
fn scalar_chain_rule_1x1() {
    let x = Tensor::new(&[1, 1, 1, 1], vec![3.0f64]).unwrap();
    let w = Tensor::new(&[1, 1, 1, 1], vec![-2.0f64]).unwrap();
    let b = Tensor::new(&[1], vec![0.5f64]).unwrap();
    assert_eq!(conv2d(&x, &w, &b, 0).unwrap().data(), &[-5.5]);
    let g = conv2d_backward(&Tensor::full(&[1, 1, 1, 1], 1.0).unwrap(), &x, &w, 0).unwrap();
    assert_eq!(g.weight.data(), &[3.0]);
    assert_eq!(g.x.data(), &[-2.0]);
    assert_eq!(g.bias.data(), &[1.0]);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let x = gaussian_fill::<f64>(&[1, 2, 5, 5], 7, 0.0, 1.0).unwrap();
    let w = gaussian_fill::<f64>(&[3, 2, 3, 3], 8, 0.0, 1.0).unwrap();
    let g = conv2d_backward(&Tensor::zeros(&[1, 3, 5, 5]).unwrap(), &x, &w, 1).unwrap();
    assert_eq!(g.x.max_abs() + g.weight.max_abs() + g.bias.max_abs(), 0.0);
}

#[test]
fn finite_difference_check() {
    for (seed, k) in [(11, 3), (12, 1), (13, 5)] {
        for (name, r) in gradcheck_conv(seed, [2, 3, 6, 5], 2, k, 1e-4, 1e-5).unwrap() {
            assert!(r.passed, "k={k} {name}: {:e} at {:?}", r.max_relative_error, r.worst_coordinate);
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_in_input_and_weight(seed in any::<u64>(), a in -2.0f64..2.0, c in -2.0f64..2.0, k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut rng = Rng::new(seed);
        let x1 = lsdfn::rng::gaussian_from::<f64>(&mut rng, &[1, 2, 6, 6], 0.0, 1.0).unwrap();
        let x2 = lsdfn::rng::gaussian_from::<f64>(&mut rng, &[1, 2, 6, 6], 0.0, 1.0).unwrap();
        let w1 = lsdfn::rng::gaussian_from::<f64>(&mut rng, &[3, 2, k, k], 0.0, 1.0).unwrap();
        let w2 = lsdfn::rng::gaussian_from::<f64>(&mut rng, &[3, 2, k, k], 0.0, 1.0).unwrap();
        let zero = Tensor::zeros(&[3]).unwrap();
        let pad = k / 2;

        let mixed = x1.scale(a).add(&x2.scale(c)).unwrap();
        let lhs = conv2d(&mixed, &w1, &zero, pad).unwrap();
        let rhs = conv2d(&x1, &w1, &zero, pad).unwrap().scale(a).add(&conv2d(&x2, &w1, &zero, pad).unwrap().scale(c)).unwrap();
        prop_assert!(lhs.relative_error(&rhs).unwrap() <= 1e-6);

        let mixed_w = w1.scale(a).add(&w2.scale(c)).unwrap();
        let lhs = conv2d(&x1, &mixed_w, &zero, pad).unwrap();
        let rhs = conv2d(&x1, &w1, &zero, pad).unwrap().scale(a).add(&conv2d(&x1, &w2, &zero, pad).unwrap().scale(c)).unwrap();
        prop_assert!(lhs.relative_error(&rhs).unwrap() <= 1e-6);
    }

    #[test]
    fn adjoint_identity(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5]), h in 3usize..8, w in 3usize..8) {
        let mut rng = Rng::new(seed);
        let x = lsdfn::rng::gaussian_from::<f64>(&mut rng, &[2, 3, h, w], 0.0, 1.0).unwrap();
        let wt = lsdfn::rng::gaussian_from::<f64>(&mut rng, &[2, 3, k, k], 0.0, 1.0).unwrap();
        let b = lsdfn::rng::gaussian_from::<f64>(&mut rng, &[2], 0.0, 1.0).unwrap();
        let g = lsdfn::rng::gaussian_from::<f64>(&mut rng, &[2, 2, h, w], 0.0, 1.0).unwrap();
        let y = conv2d(&x, &wt, &b, k / 2).unwrap();
        prop_assert_eq!(y.shape(), &[2, 2, h, w]);
        let back = conv2d_backward(&g, &x, &wt, k / 2).unwrap();
        // <g, conv(x)> is bilinear: it equals <grad_x, x> and also <grad_w, w> + <grad_b, b>.
        let lhs = g.dot(&y).unwrap();
        let via_x = back.x.dot(&x).unwrap() + back.bias.dot(&b).unwrap();
        let via_w = back.weight.dot(&wt).unwrap() + back.bias.dot(&b).unwrap();
        prop_assert!(rel(lhs, via_x) <= 1e-6, "{} vs {}", lhs, via_x);
        prop_assert!(rel(lhs, via_w) <= 1e-6, "{} vs {}", lhs, via_w);
    }

    #[test]
    fn deterministic(seed in any::<u64>()) {
        let x = gaussian_fill::<f32>(&[1, 2, 5, 5], seed, 0.0, 1.0).unwrap();
        let w = gaussian_fill::<f32>(&[2, 2, 3, 3], seed ^ 1, 0.0, 1.0).unwrap();
        let b = Tensor::zeros(&[2]).unwrap();
        prop_assert!(conv2d(&x, &w, &b, 1).unwrap().bitwise_eq(&conv2d(&x, &w, &b, 1).unwrap()));
    }
}
