use fuseseg::tensor::{sequence_index, Mode, RunningStats, Tape, Tensor};
use fuseseg::{Tensor64, Error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct seven-loop convolution (plus batch and channel loops).
fn conv_oracle(x: &Tensor64, k: &Tensor64, b: &[f64], stride: usize, pad: usize) -> Tensor64 {
    let [n, d, h, w, ci] = x.dims5().unwrap();
    let [kk, _, _, _, co] = k.dims5().unwrap();
    let out = |e: usize| (e + 2 * pad - kk) / stride + 1;
    let (od, oh, ow) = (out(d), out(h), out(w));
    let xs = x.data();
    let ks = k.data();
    let mut y = vec![0.0; n * od * oh * ow * co];
    for b_ in 0..n {
        for z in 0..od {
            for yy in 0..oh {
                for xx in 0..ow {
                    for o in 0..co {
                        let mut acc = b[o];
                        for a in 0..kk {
                            for bb in 0..kk {
                                for c in 0..kk {
                                    let iz = (z * stride + a) as isize - pad as isize;
                                    let iy = (yy * stride + bb) as isize - pad as isize;
                                    let ix = (xx * stride + c) as isize - pad as isize;
                                    if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                    for i in 0..ci {
                                        let xv = xs[(((b_ * d + iz) * h + iy) * w + ix) * ci + i];
                                        let kv = ks[(((a * kk + bb) * kk + c) * ci + i) * co + o];
                                        acc += xv * kv;
                                    }
                                }
                            }
                        }
                        y[(((b_ * od + z) * oh + yy) * ow + xx) * co + o] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(&[n, od, oh, ow, co], y).unwrap()
}

/// Scatter form of the stride-2 transposed convolution: input voxel `i`
/// with tap `t` lands on output `2i − 1 + t`.
fn deconv_oracle(x: &Tensor64, k: &Tensor64, b: &[f64]) -> Tensor64 {
    let [n, d, h, w, ci] = x.dims5().unwrap();
    let co = k.shape()[3];
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut y = vec![0.0; n * od * oh * ow * co];
    for v in y.chunks_exact_mut(co) {
        v.copy_from_slice(b);
    }
    for b_ in 0..n {
        for z in 0..d {
            for yy in 0..h {
                for xx in 0..w {
                    for a in 0..3 {
                        for bb in 0..3 {
                            for c in 0..3 {
                                let oz = (2 * z + a) as isize - 1;
                                let oy = (2 * yy + bb) as isize - 1;
                                let ox = (2 * xx + c) as isize - 1;
                                if oz < 0 || oy < 0 || ox < 0 || oz >= od as isize || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let o = (((b_ * od + oz as usize) * oh + oy as usize) * ow + ox as usize) * co;
                                for i in 0..ci {
                                    let xv = x.data()[(((b_ * d + z) * h + yy) * w + xx) * ci + i];
                                    for oc in 0..co {
                                        let kv = k.data()[(((a * 3 + bb) * 3 + c) * co + oc) * ci + i];
                                        y[o + oc] += xv * kv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, od, oh, ow, co], y).unwrap()
}

fn max_rel(a: &Tensor64, b: &Tensor64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = b.max_abs().max(1e-12);
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn conv(x: &Tensor64, k: &Tensor64, b: &Tensor64, stride: usize, pad: usize) -> Tensor64 {
    let mut t = Tape::new();
    let (xv, kv, bv) = (t.constant(x.clone()), t.constant(k.clone()), t.constant(b.clone()));
    let y = t.conv3d(xv, kv, Some(bv), stride, pad).unwrap();
    t.value(y).clone()
}

fn deconv(x: &Tensor64, k: &Tensor64, b: &Tensor64) -> Tensor64 {
    let mut t = Tape::new();
    let (xv, kv, bv) = (t.constant(x.clone()), t.constant(k.clone()), t.constant(b.clone()));
    let y = t.deconv3d(xv, kv, Some(bv), 2).unwrap();
    t.value(y).clone()
}

#[test]
fn conv_all_ones_sums_27() {
    let x = Tensor64::ones(&[1, 3, 3, 3, 1]);
    let k = Tensor64::ones(&[3, 3, 3, 1, 1]);
    let y = conv(&x, &k, &Tensor::zeros(&[1]), 1, 0);
    assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
    assert_eq!(y.item(), 27.0);
}

#[test]
fn conv_delta_kernel_is_identity() {
    let r = &mut rng(1);
    let x = Tensor64::randn(&[2, 4, 3, 5, 1], 1.0, r);
    let mut k = Tensor64::zeros(&[3, 3, 3, 1, 1]);
    k.data_mut()[13] = 1.0;
    assert_eq!(conv(&x, &k, &Tensor::zeros(&[1]), 1, 1), x);
}

#[test]
fn conv_random_matches_loop() {
    let r = &mut rng(2);
    let x = Tensor64::randn(&[1, 4, 4, 4, 2], 1.0, r);
    let k = Tensor64::randn(&[3, 3, 3, 2, 3], 1.0, r);
    let b = Tensor64::randn(&[3], 1.0, r);
    assert!(max_rel(&conv(&x, &k, &b, 1, 1), &conv_oracle(&x, &k, b.data(), 1, 1)) < 1e-6);
}

#[test]
fn conv_exhaustive_small_shapes() {
    let r = &mut rng(3);
    let sizes = [1, 2, 4];
    let mut checked = 0;
    for &d in &sizes {
        for &h in &sizes {
            for &w in &sizes {
                for ci in 1..=3 {
                    for co in 1..=3 {
                        for stride in [1, 2] {
                            for pad in [0, 1] {
                                for kk in [1, 3] {
                                    if [d, h, w].iter().any(|&e| e + 2 * pad < kk) {
                                        continue;
                                    }
                                    let x = Tensor64::randn(&[2, d, h, w, ci], 1.0, r);
                                    let k = Tensor64::randn(&[kk, kk, kk, ci, co], 1.0, r);
                                    let b = Tensor64::randn(&[co], 1.0, r);
                                    let got = conv(&x, &k, &b, stride, pad);
                                    let want = conv_oracle(&x, &k, b.data(), stride, pad);
                                    assert!(max_rel(&got, &want) < 1e-6, "{d}x{h}x{w} ci{ci} co{co} s{stride} p{pad} k{kk}");
                                    checked += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    assert!(checked > 1000);
}

#[test]
fn conv_channel_mismatch_names_both_shapes() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[1, 3, 3, 3, 2]));
    let k = t.constant(Tensor::zeros(&[3, 3, 3, 4, 1]));
    let msg = t.conv3d(x, k, None, 1, 1).unwrap_err().to_string();
    assert!(msg.contains("[1, 3, 3, 3, 2]") && msg.contains("[3, 3, 3, 4, 1]"), "{msg}");
}

#[test]
fn deconv_single_voxel_copies_taps() {
    let x = Tensor64::ones(&[1, 1, 1, 1, 1]);
    let y = deconv(&x, &Tensor::ones(&[3, 3, 3, 1, 1]), &Tensor::zeros(&[1]));
    assert_eq!(y.shape(), &[1, 2, 2, 2, 1]);
    assert!(y.data().iter().all(|&v| v == 1.0));
    let r = &mut rng(4);
    let k = Tensor64::randn(&[3, 3, 3, 1, 1], 1.0, r);
    let y = deconv(&x, &k, &Tensor::zeros(&[1]));
    // output (a, b, c) is reached through tap (a+1, b+1, c+1)
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..2 {
                assert_eq!(y.data()[(a * 2 + b) * 2 + c], k.data()[((a + 1) * 3 + b + 1) * 3 + c + 1]);
            }
        }
    }
}

#[test]
fn deconv_matches_scatter_and_zero_maps_to_zero() {
    let r = &mut rng(5);
    for (d, h, w, ci, co) in [(1, 2, 3, 2, 3), (2, 2, 2, 3, 1), (3, 1, 2, 1, 2)] {
        let x = Tensor64::randn(&[2, d, h, w, ci], 1.0, r);
        let k = Tensor64::randn(&[3, 3, 3, co, ci], 1.0, r);
        let b = Tensor64::randn(&[co], 1.0, r);
        assert!(max_rel(&deconv(&x, &k, &b), &deconv_oracle(&x, &k, b.data())) < 1e-6);
        let z = deconv(&Tensor::zeros(x.shape()), &k, &Tensor::zeros(&[co]));
        assert!(z.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn deconv_is_adjoint_of_strided_conv() {
    let r = &mut rng(6);
    let x = Tensor64::randn(&[1, 2, 3, 2, 3], 1.0, r);
    let y = Tensor64::randn(&[1, 4, 6, 4, 2], 1.0, r);
    let k = Tensor64::randn(&[3, 3, 3, 2, 3], 1.0, r);
    let lhs = deconv(&x, &k, &Tensor::zeros(&[2])).dot(&y);
    let rhs = x.dot(&conv(&y, &k, &Tensor::zeros(&[3]), 2, 1));
    assert!((lhs - rhs).abs() / rhs.abs().max(1.0) < 1e-6);
}

#[test]
fn deconv_rejects_other_strides() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 2, 2, 1]));
    let k = t.constant(Tensor::zeros(&[3, 3, 3, 1, 1]));
    assert!(t.deconv3d(x, k, None, 1).is_err());
    assert!(t.deconv3d(x, k, None, 3).is_err());
}

fn bn(x: &Tensor64, gamma: &Tensor64, beta: &Tensor64, stats: &mut RunningStats<f64>, mode: Mode) -> Tensor64 {
    let mut t = Tape::new();
    let (xv, g, b) = (t.constant(x.clone()), t.constant(gamma.clone()), t.constant(beta.clone()));
    let y = t.batchnorm(xv, g, b, stats, mode).unwrap();
    t.value(y).clone()
}

fn fresh_stats(c: usize) -> RunningStats<f64> {
    RunningStats {
        mean: Tensor::zeros(&[c]),
        var: Tensor::ones(&[c]),
    }
}

#[test]
fn batchnorm_train_statistics() {
    let r = &mut rng(7);
    let c = 3;
    let x = Tensor64::randn(&[2, 3, 4, 5, c], 2.5, r).map(|v| v + 4.0);
    let y = bn(&x, &Tensor::ones(&[c]), &Tensor::zeros(&[c]), &mut fresh_stats(c), Mode::Train);
    for ch in 0..c {
        let vals: Vec<f64> = y.data().iter().skip(ch).step_by(c).copied().collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn batchnorm_fixed_point_and_zero_gamma() {
    // two values per channel, ±1: already zero-mean and unit-variance
    let x = Tensor::new(&[2, 1, 1, 1, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
    let y = bn(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), &mut fresh_stats(2), Mode::Train);
    assert!(max_rel(&y, &x) < 1e-4);
    let beta = Tensor::new(&[2], vec![0.3, -0.7]).unwrap();
    let y = bn(&x, &Tensor::zeros(&[2]), &beta, &mut fresh_stats(2), Mode::Train);
    assert_eq!(y.data(), &[0.3, -0.7, 0.3, -0.7]);
}

#[test]
fn batchnorm_running_update_and_eval() {
    let x = Tensor::new(&[4, 1, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut stats = fresh_stats(1);
    bn(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), &mut stats, Mode::Train);
    assert!((stats.mean.item() - 0.25).abs() < 1e-12);
    assert!((stats.var.item() - (0.9 + 0.1 * 1.25)).abs() < 1e-12);
    let y = bn(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), &mut stats, Mode::Eval);
    let want = (1.0 - 0.25) / (1.025f64 + 1e-5).sqrt();
    assert!((y.data()[0] - want).abs() < 1e-12);
}

#[test]
fn batchnorm_single_element_is_finite() {
    let x = Tensor::new(&[1, 1, 1, 1, 1], vec![3.0]).unwrap();
    let y = bn(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), &mut fresh_stats(1), Mode::Train);
    assert_eq!(y.item(), 0.0);
}

#[test]
fn relu6_values() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new(&[5], vec![-1.0, 3.0, 9.0, 0.0, 6.0]).unwrap());
    let y = t.relu6(x);
    assert_eq!(t.value(y).data(), &[0.0, 3.0, 6.0, 0.0, 6.0]);
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn dropout_identities_and_mean() {
    let r = &mut rng(8);
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::ones(&[1_000_000]));
    assert_eq!(t.dropout(x, 0.0, Mode::Train, r).unwrap(), x);
    assert_eq!(t.dropout(x, 0.7, Mode::Eval, r).unwrap(), x);
    let y = t.dropout(x, 0.5, Mode::Train, r).unwrap();
    let v = t.value(y);
    assert!(v.data().iter().all(|&e| e == 0.0 || e == 2.0));
    let mean = v.sum() / v.len() as f64;
    assert!((mean - 1.0).abs() < 0.01, "{mean}");
    assert!(t.dropout(x, 1.0, Mode::Train, r).is_err());
}

#[test]
fn matmul_cases() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = t.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[3.0, 7.0]);

    let r = &mut rng(9);
    let m = Tensor64::randn(&[4, 4], 1.0, r);
    let eye = Tensor::new(&[4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    let (e, mv) = (t.constant(eye), t.constant(m.clone()));
    let p = t.matmul(e, mv).unwrap();
    assert_eq!(t.value(p), &m);

    let a = Tensor64::randn(&[5, 7], 1.0, r);
    let b = Tensor64::randn(&[7, 3], 1.0, r);
    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
    let c = t.matmul(av, bv).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let want: f64 = (0..7).map(|k| a.data()[i * 7 + k] * b.data()[k * 3 + j]).sum();
            assert!((t.value(c).data()[i * 3 + j] - want).abs() < 1e-10);
        }
    }
    let bad = t.constant(Tensor::zeros(&[4, 3]));
    let msg = t.matmul(av, bad).unwrap_err().to_string();
    assert!(msg.contains("[5, 7]") && msg.contains("[4, 3]"), "{msg}");
}

#[test]
fn softmax_cases() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    let x = t.constant(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 0.0]);
    let r = &mut rng(10);
    let x = t.constant(Tensor::randn(&[17], 3.0, r));
    let y = t.softmax(x, 0).unwrap();
    assert!((t.value(y).sum() - 1.0).abs() < 1e-6);
}

#[test]
fn unfold_fold_layout() {
    let r = &mut rng(11);
    let x = Tensor64::randn(&[1, 2, 2, 2, 3], 1.0, r);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let u = t.unfold(xv).unwrap();
    let f = t.fold(u, (2, 2, 2)).unwrap();
    assert_eq!(t.value(f), &x);

    let x = Tensor64::randn(&[1, 2, 3, 4, 5], 1.0, r);
    let xv = t.constant(x.clone());
    let u = t.unfold(xv).unwrap();
    assert_eq!(t.shape(u), &[1, 24, 5]);
    for d in 0..2 {
        for h in 0..3 {
            for w in 0..4 {
                let s = sequence_index(d, h, w, (2, 3, 4));
                assert_eq!(s, d * 12 + h * 4 + w);
                assert_eq!(t.value(u).data()[s * 5 + 2], x.data()[((d * 3 + h) * 4 + w) * 5 + 2]);
            }
        }
    }
    assert!(t.fold(u, (2, 3, 5)).is_err());
}

#[test]
fn backward_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new(&[2, 3], vec![1.0; 6]).unwrap());
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    // a second pass accumulates
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[4.0, 8.0, 12.0]);
    assert!(matches!(t.backward(sq), Err(Error::NonScalarLoss(_))));
}

#[test]
fn cleared_tape_frees_records() {
    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::ones(&[4]));
    let y = t.relu6(x);
    let _ = t.sum(y);
    assert!(t.recorded_ops() > 0);
    t.clear();
    assert_eq!(t.len(), 0);
    assert_eq!(t.recorded_ops(), 0);
}

#[test]
fn cross_entropy_matches_naive_sum() {
    let r = &mut rng(12);
    let logits = Tensor64::randn(&[3, 2, 2, 1, 5], 2.0, r);
    let labels: Vec<usize> = (0..12).map(|_| r.random_range(0..5)).collect();
    let got = fuseseg::fusion::cross_entropy(&logits, &labels).unwrap();
    let mut want = 0.0;
    for (v, &l) in labels.iter().enumerate() {
        let row = &logits.data()[v * 5..v * 5 + 5];
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        want -= (row[l].exp() / z).ln();
    }
    want /= 12.0;
    assert!((got - want).abs() / want < 1e-6);
}

#[test]
fn same_seed_same_output() {
    let run = || {
        let r = &mut rng(13);
        let x = Tensor::<f32>::randn(&[1, 4, 4, 4, 2], 1.0, r);
        let k = Tensor::<f32>::randn(&[3, 3, 3, 2, 2], 1.0, r);
        let mut t = Tape::new();
        let (xv, kv) = (t.constant(x), t.constant(k));
        let y = t.conv3d(xv, kv, None, 1, 1).unwrap();
        let y = t.dropout(y, 0.3, Mode::Train, r).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 12), axis in 0usize..3) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[2, 3, 2], vals).unwrap());
        let y = t.softmax(x, axis).unwrap();
        let y = t.value(y);
        prop_assert!(y.data().iter().all(|&p| p >= 0.0));
        let shape = [2usize, 3, 2];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..shape[axis]).map(|a| y.data()[(o * shape[axis] + a) * inner + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fold_unfold_bitwise(d in 1usize..4, h in 1usize..4, w in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
        let x = Tensor::<f32>::randn(&[2, d, h, w, c], 1.0, &mut rng(seed));
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let u = t.unfold(xv).unwrap();
        let f = t.fold(u, (d, h, w)).unwrap();
        prop_assert_eq!(t.value(f), &x);
        let seq = t.value(u).clone();
        let sv = t.constant(seq.clone());
        let f2 = t.fold(sv, (d, h, w)).unwrap();
        let u2 = t.unfold(f2).unwrap();
        prop_assert_eq!(t.value(u2), &seq);
    }
}
