use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::gradcheck;
use super::*;

fn rand_t(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

/// Six nested loops, zero padding, no shared code with the GEMM path.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
    let (cin, h, wd) = x.chw().unwrap();
    let (cout, kh, kw) = (w.dims()[0], w.dims()[2], w.dims()[3]);
    let mut out = Tensor::zeros(&[cout, h, wd]);
    for co in 0..cout {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b[co];
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let sy = y as isize + ky as isize - (kh / 2) as isize;
                            let sx = xx as isize + kx as isize - (kw / 2) as isize;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            acc += x.at3(ci, sy as usize, sx as usize)
                                * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out.data_mut()[(co * h + y) * wd + xx] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel() {
    let x = Tensor::new(&[1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
    let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let mut spec = ConvSpec::new(1, 1, 1);
    spec.has_bias = false;
    let y = conv2d(&x, &w, None, &spec).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_constant_field_interior() {
    let c = 0.75f32;
    let x = Tensor::full(&[1, 5, 5], c);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0f32);
    let mut spec = ConvSpec::new(1, 1, 3);
    spec.has_bias = false;
    let y = conv2d(&x, &w, None, &spec).unwrap();
    assert_eq!(y.at3(0, 2, 2), 9.0 * c);
    // corner sees only four taps
    assert_eq!(y.at3(0, 0, 0), 4.0 * c);
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in [3, 7] {
        let x = rand_t(&mut rng, &[3, 4, 4]);
        let w = rand_t(&mut rng, &[2, 3, k, k]);
        let b = rand_t(&mut rng, &[2]);
        let spec = ConvSpec::new(3, 2, k);
        let y = conv2d(&x, &w, Some(&b), &spec).unwrap();
        let want = conv_oracle(&x, &w, b.data());
        for (a, e) in y.data().iter().zip(want.data()) {
            assert!((a - e).abs() <= 1e-5 * e.abs().max(1.0));
        }
    }
}

#[test]
fn conv_f32_matches_oracle_on_wide_tiles() {
    // Wide enough that im2col is split into several row tiles.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_t(&mut rng, &[24, 48, 40]);
    let w = rand_t(&mut rng, &[4, 24, 7, 7]);
    let b = rand_t(&mut rng, &[4]);
    let want = conv_oracle(&x, &w, b.data());
    let y = conv2d(&x.cast::<f32>(), &w.cast(), Some(&b.cast()), &ConvSpec::new(24, 4, 7)).unwrap();
    for (a, e) in y.data().iter().zip(want.data()) {
        assert!((*a as f64 - e).abs() <= 1e-4 * e.abs().max(1.0));
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let x = Tensor::<f32>::zeros(&[2, 4, 4]);
    let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
    let mut spec = ConvSpec::new(3, 1, 3);
    spec.has_bias = false;
    assert!(matches!(conv2d(&x, &w, None, &spec), Err(Error::Shape(_))));
    let even = ConvSpec::new(2, 1, 2);
    assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), Some(&Tensor::zeros(&[1])), &even).is_err());
}

#[test]
fn conv_rejects_non_finite_input() {
    let mut x = Tensor::<f32>::zeros(&[1, 3, 3]);
    x.data_mut()[4] = f32::NAN;
    let w = Tensor::zeros(&[1, 1, 3, 3]);
    let mut spec = ConvSpec::new(1, 1, 3);
    spec.has_bias = false;
    assert!(matches!(conv2d(&x, &w, None, &spec), Err(Error::Numeric(_))));
    assert!(Tensor::new(&[1], vec![f32::INFINITY]).is_err());
}

#[test]
fn leaky_relu_definition() {
    let x = Tensor::new(&[3], vec![0.0f32, -1.0, 2.0]).unwrap();
    let y = leaky_relu(&x, 0.1);
    assert_eq!(y.data(), &[0.0, -0.1, 2.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = rand_t(&mut rng, &[2, 3, 3]);
    let y = leaky_relu(&r, 0.1);
    for (a, &v) in y.data().iter().zip(r.data()) {
        assert_eq!(*a, if v > 0.0 { v } else { 0.1 * v });
    }
}

#[test]
fn leaky_relu_derivative_at_two() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(2.0));
    let y = g.leaky_relu(x, 0.1).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0]);
}

fn resize_oracle(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (c, h, w) = x.chw().unwrap();
    let src = |i: usize, n_in: usize, n_out: usize| {
        let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    Tensor::from_fn(&[c, oh, ow], |idx| {
        let (ch, y, xx) = (idx / (oh * ow), idx / ow % oh, idx % ow);
        let (y0, y1, fy) = src(y, h, oh);
        let (x0, x1, fx) = src(xx, w, ow);
        let v = |yy, xq| x.at3(ch, yy, xq);
        (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
    })
}

#[test]
fn resize_properties() {
    let c = Tensor::<f32>::full(&[2, 4, 6], 0.3);
    for f in [Resize::Up2, Resize::Down2] {
        let y = bilinear_resize(&c, f).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }
    let x = Tensor::new(&[1, 2, 2], vec![1.0f32, 2.0, 3.0, 6.0]).unwrap();
    let y = bilinear_resize(&x, Resize::Down2).unwrap();
    assert_eq!(y.data(), &[3.0]);
    assert!(matches!(
        bilinear_resize(&Tensor::<f32>::zeros(&[1, 3, 4]), Resize::Down2),
        Err(Error::Shape(_))
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = rand_t(&mut rng, &[1, 4, 4]);
    let up = bilinear_resize(&r, Resize::Up2).unwrap();
    assert!(up.max_abs_diff(&resize_oracle(&r, 8, 8)) < 1e-6);
}

#[test]
fn bilinear_sample_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_t(&mut rng, &[3, 4, 5]);
    // lattice points gather exactly
    let pts = [(2.0, 3.0), (0.0, 0.0), (3.0, 4.0)];
    let s = bilinear_sample(&x, &pts).unwrap();
    for (p, row) in pts.iter().zip(&s) {
        for c in 0..3 {
            assert_eq!(row[c], x.at3(c, p.0 as usize, p.1 as usize));
        }
    }
    let ab = Tensor::new(&[1, 2, 1], vec![1.0f64, 3.0]).unwrap();
    assert_eq!(bilinear_sample(&ab, &[(0.5, 0.0)]).unwrap()[0][0], 2.0);
    // clamp-then-interpolate: far away reads the nearest border pixel
    let far = bilinear_sample(&x, &[(-50.0, 2.5), (100.0, 100.0)]).unwrap();
    for c in 0..3 {
        assert!((far[0][c] - 0.5 * (x.at3(c, 0, 2) + x.at3(c, 0, 3))).abs() < 1e-12);
        assert_eq!(far[1][c], x.at3(c, 3, 4));
    }
}

#[test]
fn sample_kv_shift_on_ramp() {
    // horizontal ramp value = x
    let f = Tensor::<f32>::from_fn(&[1, 4, 6], |i| (i % 6) as f32);
    let mut off = Tensor::zeros(&[8, 4, 6]);
    for i in 0..4 {
        off.data_mut()[(2 * i) * 24..(2 * i + 1) * 24].fill(1.0);
    }
    let s = sample_kv(&f, &off).unwrap();
    assert_eq!(s.dims(), &[4, 1, 4, 6]);
    for i in 0..4 {
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(s.data()[(i * 4 + y) * 6 + x], x as f32 + 1.0);
            }
        }
    }
    let zero = sample_kv(&f, &Tensor::zeros(&[8, 4, 6])).unwrap();
    for i in 0..4 {
        assert_eq!(&zero.data()[i * 24..(i + 1) * 24], f.data());
    }
    assert!(sample_kv(&f, &Tensor::zeros(&[8, 2, 3])).is_err());
}

#[test]
fn pixel_shuffle_index_map() {
    let x = Tensor::<f32>::from_fn(&[48, 1, 1], |i| i as f32);
    let y = pixel_shuffle(&x, 4).unwrap();
    assert_eq!(y.dims(), &[3, 4, 4]);
    for c in 0..3 {
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(y.at3(c, i, j), (c * 16 + i * 4 + j) as f32);
            }
        }
    }
    assert_eq!(pixel_unshuffle(&y, 4).unwrap(), x);
    let c = Tensor::<f32>::full(&[8, 2, 3], 0.5);
    assert!(pixel_shuffle(&c, 2).unwrap().data().iter().all(|&v| v == 0.5));
    assert_eq!(pixel_shuffle(&c, 1).unwrap(), c);
    assert!(matches!(pixel_shuffle(&Tensor::<f32>::zeros(&[6, 1, 1]), 2), Err(Error::Shape(_))));
}

#[test]
fn nearest_upsample_replicates() {
    let x = Tensor::new(&[1, 1, 1], vec![0.25f32]).unwrap();
    let y = nearest_upsample(&x, 4).unwrap();
    assert_eq!(y.dims(), &[1, 4, 4]);
    assert!(y.data().iter().all(|&v| v == 0.25));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = rand_t(&mut rng, &[2, 3, 2]);
    let y = nearest_upsample(&r, 3).unwrap();
    for c in 0..2 {
        for yy in 0..9 {
            for xx in 0..6 {
                assert_eq!(y.at3(c, yy, xx), r.at3(c, yy / 3, xx / 3));
            }
        }
    }
}

#[test]
fn softmax_cases() {
    assert_eq!(softmax(&[3.0f64], 1.0), vec![1.0]);
    assert_eq!(softmax(&[0.2f64, 0.2], 5.0), vec![0.5, 0.5]);
    let l = [0.3f64, -1.2, 2.0, 0.7];
    let s = 0.5;
    let z: f64 = l.iter().map(|v| (s * v).exp()).sum();
    for (a, v) in softmax(&l, s).iter().zip(l) {
        assert!((a - (s * v).exp() / z).abs() < 1e-7);
    }
}

#[test]
fn attention_saturates_on_aligned_key() {
    // 1x1 image, one group of query dim 2, 4 candidates.
    let q = Tensor::new(&[2, 1, 1], vec![1.0f64, 0.0]).unwrap();
    let keys = Tensor::new(&[4, 2, 1, 1], vec![0.0, 1.0, 30.0, 0.0, 0.0, -1.0, 0.0, 1.0]).unwrap();
    let vals = Tensor::new(&[4, 2, 1, 1], vec![1.0, 1.0, 5.0, 7.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
    let (out, w) = attention(&q, &keys, &vals, 1, 1.0 / 8f64.sqrt()).unwrap();
    assert!(w.data()[1] > 0.99);
    assert!((out.data()[0] - 5.0).abs() < 0.1);
    let total: f64 = w.data().iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn backward_without_forward_is_state_error() {
    let mut a = Graph::<f32>::new();
    let b = Graph::<f32>::new();
    let v = a.param(Tensor::scalar(1.0));
    let mut b = b;
    assert!(matches!(b.backward(v), Err(Error::State(_))));
    let c = a.constant(Tensor::scalar(1.0));
    assert!(matches!(a.backward(c), Err(Error::State(_))));
}

#[test]
fn conv_weight_gradient_vs_finite_differences() {
    // 1x1x3x3 weights on a 5x5 input, eps = 1e-3.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x64 = rand_t(&mut rng, &[1, 5, 5]);
    let w64 = rand_t(&mut rng, &[1, 1, 3, 3]);
    let cot = rand_t(&mut rng, &[1, 5, 5]);

    fn check<T: Real>(x: &Tensor<T>, w: &Tensor<T>, cot: &Tensor<T>) -> f64 {
        let mut g = Graph::<T>::new();
        let xv = g.constant(x.clone());
        let wv = g.param(w.clone());
        let y = g.conv2d(xv, wv, None, 1).unwrap();
        g.backward_with(y, cot.data().to_vec()).unwrap();
        let analytic = g.grad(wv).unwrap().to_vec();
        let f = |w: &Tensor<T>| -> f64 {
            let mut g = Graph::<T>::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, None, 1).unwrap();
            g.value(y).data().iter().zip(cot.data()).map(|(&a, &b)| (a * b).as_f64()).sum()
        };
        let eps = 1e-3;
        let mut worst = 0.0f64;
        for j in 0..9 {
            let mut p = w.clone();
            let mut m = w.clone();
            p.data_mut()[j] += T::lit(eps);
            m.data_mut()[j] -= T::lit(eps);
            let n = (f(&p) - f(&m)) / (2.0 * eps);
            let a = analytic[j].as_f64();
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-3));
        }
        worst
    }
    assert!(check(&x64.cast::<f32>(), &w64.cast(), &cot.cast()) < 1e-3);
    assert!(check(&x64, &w64, &cot) < 1e-6);
}

#[test]
fn gradcheck_identity_is_exact() {
    let r = gradcheck::<f64>("identity", 5, 1e-12, 1).unwrap();
    assert_eq!(r.max_rel_error, 0.0);
}

#[test]
fn gradcheck_softmax_and_conv7() {
    let r = gradcheck::<f64>("softmax", 20, 1e-4, 2).unwrap();
    assert!(r.passed, "{r:?}");
    let r = gradcheck::<f64>("conv2d_7x7", 10, 1e-3, 3).unwrap();
    assert!(r.passed, "{r:?}");
    let r = gradcheck::<f32>("conv2d_7x7", 5, 1e-2, 3).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn gradcheck_sampling_wrt_coordinates() {
    let r = gradcheck::<f64>("bilinear_sample", 20, 1e-4, 5).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn gradcheck_unknown_op() {
    assert!(matches!(gradcheck::<f64>("nope", 1, 1e-4, 0), Err(Error::UnknownOp(_))));
}

#[test]
fn injected_fault_is_detected() {
    crate::fault::set_conv_backward_flip(true);
    let r = gradcheck::<f64>("conv2d", 3, 1e-4, 9);
    crate::fault::set_conv_backward_flip(false);
    assert!(!r.unwrap().passed);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_preserves_spatial_dims(c in 1usize..4, h in 1usize..9, w in 1usize..9, k in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let x = Tensor::<f32>::full(&[c, h, w], 0.5);
        let wt = Tensor::<f32>::full(&[2, c, k, k], 0.1);
        let y = conv2d(&x, &wt, Some(&Tensor::zeros(&[2])), &ConvSpec::new(c, 2, k)).unwrap();
        prop_assert_eq!(y.dims(), &[2, h, w]);
    }

    #[test]
    fn softmax_is_a_distribution(l in prop::collection::vec(-50.0f64..50.0, 1..12), s in 0.01f64..4.0) {
        let p = softmax(&l, s);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lattice_sampling_gathers(seed in 0u64..1000, y in 0usize..5, x in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rand_t(&mut rng, &[2, 5, 6]);
        let s = bilinear_sample(&t, &[(y as f64, x as f64)]).unwrap();
        prop_assert_eq!(s[0][0], t.at3(0, y, x));
        prop_assert_eq!(s[0][1], t.at3(1, y, x));
    }

    #[test]
    fn shuffle_roundtrip(c in 1usize..4, h in 1usize..5, w in 1usize..5, r in 1usize..4, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rand_t(&mut rng, &[c * r * r, h, w]);
        let back = pixel_unshuffle(&pixel_shuffle(&t, r).unwrap(), r).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn ops_are_deterministic(seed in 0u64..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut rng, &[3, 6, 6]).cast::<f32>();
        let w = rand_t(&mut rng, &[4, 3, 3, 3]).cast::<f32>();
        let spec = ConvSpec::new(3, 4, 3).leaky();
        let b = Tensor::zeros(&[4]);
        let a = conv2d(&x, &w, Some(&b), &spec).unwrap();
        let c = conv2d(&x, &w, Some(&b), &spec).unwrap();
        prop_assert!(a.data().iter().zip(c.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
