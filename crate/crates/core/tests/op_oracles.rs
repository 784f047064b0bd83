//! Forward-path oracles for the numeric core: every op is checked against
//! an independent direct computation on small random cases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vrs_core::ops::elementwise::{gelu, sigmoid};
use vrs_core::ops::norm::NormKind;
use vrs_core::tape::Tape;
use vrs_core::tensor::Tensor4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4 {
    let numel: usize = dims.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor4::new(dims, data).unwrap()
}

/// Direct six-nested-loop cross-correlation with the documented
/// accumulation order (channels, then kernel rows, then kernel columns).
fn conv_oracle(
    x: &Tensor4,
    w: &Tensor4,
    bias: Option<&Tensor4>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Tensor4 {
    let [n, _, h, wid] = x.dims();
    let [oc, icpg, kh, kw] = w.dims();
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wid + 2 * padding - kw) / stride + 1;
    let ocpg = oc / groups;
    let mut out = Tensor4::zeros([n, oc, oh, ow]);
    for b in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bt| bt.data()[o]);
                    for i in 0..icpg {
                        let c = (o / ocpg) * icpg + i;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wid {
                                    acc += x.at(b, c, iy as usize, ix as usize) * w.at(o, i, ky, kx);
                                }
                            }
                        }
                    }
                    out.set(b, o, oy, ox, acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv_box_sum_identity() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor4::ones([1, 1, 3, 3]));
    let w = tape.constant(Tensor4::ones([1, 1, 3, 3]));
    let y = tape.conv2d(x, w, None, 1, 1, 1).unwrap();
    let v = tape.value(y);
    assert_eq!(v.at(0, 0, 1, 1), 9.0);
    assert_eq!(v.at(0, 0, 0, 0), 4.0);
    assert_eq!(v.at(0, 0, 2, 2), 4.0);
    assert_eq!(v.at(0, 0, 0, 1), 6.0);
}

#[test]
fn conv_identity_kernel() {
    let mut r = rng(7);
    let xv = random_tensor(&mut r, [2, 3, 5, 4]);
    let mut tape = Tape::new();
    let x = tape.constant(xv.clone());
    let w = tape.constant(Tensor4::ones([3, 1, 1, 1]));
    let y = tape.conv2d(x, w, None, 1, 0, 3).unwrap();
    assert_eq!(tape.value(y).data(), xv.data());
}

#[test]
fn conv_matches_loop_oracle_bitwise() {
    let mut r = rng(11);
    for (dims, wdims, stride, pad, groups) in [
        ([2usize, 4, 8, 8], [4usize, 1, 3, 3], 1usize, 1usize, 4usize), // depthwise
        ([1, 3, 7, 6], [5, 3, 3, 3], 1, 1, 1),
        ([2, 4, 8, 8], [6, 2, 3, 3], 2, 1, 2),
        ([1, 2, 5, 5], [3, 2, 1, 1], 1, 0, 1), // pointwise
    ] {
        let xv = random_tensor(&mut r, dims);
        let wv = random_tensor(&mut r, wdims);
        let bv = random_tensor(&mut r, [1, wdims[0], 1, 1]);
        let expected = conv_oracle(&xv, &wv, Some(&bv), stride, pad, groups);
        let mut tape = Tape::new();
        let x = tape.constant(xv);
        let w = tape.constant(wv);
        let b = tape.constant(bv);
        let y = tape.conv2d(x, w, Some(b), stride, pad, groups).unwrap();
        assert_eq!(tape.value(y).data(), expected.data(), "conv config {dims:?}");
    }
}

#[test]
fn conv_shape_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor4::ones([1, 3, 4, 4]));
    let w = tape.constant(Tensor4::ones([2, 2, 3, 3]));
    assert!(tape.conv2d(x, w, None, 1, 1, 1).is_err());
    let w2 = tape.constant(Tensor4::ones([2, 3, 3, 3]));
    assert!(tape.conv2d(x, w2, None, 1, 1, 2).is_err());
}

#[test]
fn norm_constant_input_is_zeroed() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor4::full([1, 4, 3, 3], 2.5));
    let gamma = tape.constant(Tensor4::ones([1, 4, 1, 1]));
    let beta = tape.constant(Tensor4::zeros([1, 4, 1, 1]));
    for (kind, groups) in [(NormKind::Layer, 1), (NormKind::Group, 2)] {
        let y = tape.norm(x, gamma, beta, kind, groups, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn layer_norm_two_channel_pair() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor4::new([1, 2, 1, 1], vec![1.0, 3.0]).unwrap());
    let gamma = tape.constant(Tensor4::ones([1, 2, 1, 1]));
    let beta = tape.constant(Tensor4::zeros([1, 2, 1, 1]));
    let y = tape.norm(x, gamma, beta, NormKind::Layer, 1, 1e-12).unwrap();
    // mean 2, var 1: normalized pair is [-1, 1] up to eps.
    assert!((tape.value(y).data()[0] + 1.0).abs() < 1e-6);
    assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-6);
}

#[test]
fn group_norm_with_groups_equal_channels_is_instance_norm() {
    let mut r = rng(13);
    let xv = random_tensor(&mut r, [2, 3, 4, 4]);
    let gamma = Tensor4::ones([1, 3, 1, 1]);
    let beta = Tensor4::zeros([1, 3, 1, 1]);
    let mut tape = Tape::new();
    let x = tape.constant(xv.clone());
    let gm = tape.constant(gamma);
    let bt = tape.constant(beta);
    let y = tape.norm(x, gm, bt, NormKind::Group, 3, 1e-8).unwrap();
    // Direct per-channel instance normalization.
    for b in 0..2 {
        for c in 0..3 {
            let vals: Vec<f64> = (0..16)
                .map(|i| xv.at(b, c, i / 4, i % 4))
                .collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            for (i, v) in vals.iter().enumerate() {
                let expected = (v - mean) / (var + 1e-8).sqrt();
                assert!((tape.value(y).at(b, c, i / 4, i % 4) - expected).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn norm_statistics_invariant() {
    // |mean| < 1e-8 and |var - 1| < 1e-6 over normalized axes with identity affine.
    let mut r = rng(17);
    let xv = random_tensor(&mut r, [1, 8, 6, 6]);
    let mut tape = Tape::new();
    let x = tape.constant(xv);
    let gm = tape.constant(Tensor4::ones([1, 8, 1, 1]));
    let bt = tape.constant(Tensor4::zeros([1, 8, 1, 1]));
    let y = tape.norm(x, gm, bt, NormKind::Group, 2, 1e-10).unwrap();
    let v = tape.value(y);
    for g in 0..2 {
        let mut vals = Vec::new();
        for c in g * 4..(g + 1) * 4 {
            for i in 0..36 {
                vals.push(v.at(0, c, i / 6, i % 6));
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-8);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn activation_values() {
    assert_eq!(gelu(0.0), 0.0);
    assert_eq!(sigmoid(0.0), 0.5);
    assert!((gelu(1.0) - 0.8412).abs() < 1e-4);
}

#[test]
fn softmax_uniform_and_pair() {
    let mut tape = Tape::new();
    let u = tape.constant(Tensor4::from_flat(vec![3.0; 5]));
    let y = tape.softmax_temp(u, 2.0).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 0.2).abs() < 1e-12);
    }
    let x = tape.constant(Tensor4::from_flat(vec![1.0, 2.0]));
    let y = tape.softmax_temp(x, 1.0).unwrap();
    assert!((tape.value(y).data()[0] - 0.26894).abs() < 1e-5);
    assert!((tape.value(y).data()[1] - 0.73106).abs() < 1e-5);
    let sharp = tape.softmax_temp(x, 0.1).unwrap();
    assert!(tape.value(sharp).data()[1] > 0.9999);
    assert!(tape.softmax_temp(x, 0.0).is_err());
    assert!(tape.softmax_temp(x, -1.0).is_err());
}

#[test]
fn softmax_sums_to_one_and_keeps_argmax() {
    let mut r = rng(23);
    for _ in 0..50 {
        let n = r.gen_range(2..40);
        let vals: Vec<f64> = (0..n).map(|_| r.gen_range(-5.0..5.0)).collect();
        let t = r.gen_range(0.05..3.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor4::from_flat(vals.clone()));
        let y = tape.softmax_temp(x, t).unwrap();
        let out = tape.value(y).data();
        let sum: f64 = out.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        let argmax_in = (0..n).max_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap()).unwrap();
        let argmax_out = (0..n).max_by(|&a, &b| out[a].partial_cmp(&out[b]).unwrap()).unwrap();
        assert_eq!(argmax_in, argmax_out);
    }
}

#[test]
fn bilinear_constant_and_monotone() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor4::full([1, 1, 16, 16], 0.731));
    let up = tape.bilinear_resize(c, 64, 64).unwrap();
    for v in tape.value(up).data() {
        assert!((v - 0.731).abs() < 1e-12);
    }
    let ramp = tape.constant(Tensor4::new([1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
    let wide = tape.bilinear_resize(ramp, 2, 4).unwrap();
    for y in 0..2 {
        for x in 1..4 {
            assert!(tape.value(wide).at(0, 0, y, x) >= tape.value(wide).at(0, 0, y, x - 1));
        }
    }
}

#[test]
fn bilinear_matches_weight_oracle() {
    // Direct align-corners=false weights for a 2x2 -> 4x4 upsample.
    let mut r = rng(29);
    let xv = random_tensor(&mut r, [1, 1, 2, 2]);
    let mut tape = Tape::new();
    let x = tape.constant(xv.clone());
    let y = tape.bilinear_resize(x, 4, 4).unwrap();
    let taps = |o: usize| -> (usize, usize, f64) {
        let src = (o as f64 + 0.5) * 0.5 - 0.5;
        let i0 = src.floor();
        let f = src - i0;
        let lo = (i0.max(0.0) as usize).min(1);
        let hi = ((i0 + 1.0).max(0.0) as usize).min(1);
        (lo, hi, f)
    };
    for oy in 0..4 {
        let (y0, y1, fy) = taps(oy);
        for ox in 0..4 {
            let (x0, x1, fx) = taps(ox);
            let expected = xv.at(0, 0, y0, x0) * (1.0 - fy) * (1.0 - fx)
                + xv.at(0, 0, y0, x1) * (1.0 - fy) * fx
                + xv.at(0, 0, y1, x0) * fy * (1.0 - fx)
                + xv.at(0, 0, y1, x1) * fy * fx;
            assert!((tape.value(y).at(0, 0, oy, ox) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_single_key_and_oracle() {
    // One key/value token: softmax over a single score is 1, so every
    // query returns that value row.
    let mut r = rng(31);
    let q = random_tensor(&mut r, [1, 1, 5, 3]);
    let k = random_tensor(&mut r, [1, 1, 1, 3]);
    let v = random_tensor(&mut r, [1, 1, 1, 4]);
    let mut tape = Tape::new();
    let (qi, ki, vi) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
    let out = tape.attention(qi, ki, vi, 1.0).unwrap();
    for t in 0..5 {
        for d in 0..4 {
            assert!((tape.value(out).at(0, 0, t, d) - v.at(0, 0, 0, d)).abs() < 1e-12);
        }
    }

    // Two-step oracle on a 4x8 case: scores, row softmax, mix.
    let q = random_tensor(&mut r, [1, 1, 4, 8]);
    let k = random_tensor(&mut r, [1, 1, 4, 8]);
    let v = random_tensor(&mut r, [1, 1, 4, 8]);
    let scale = 1.0 / (8f64).sqrt();
    let mut scores = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let mut acc = 0.0;
            for d in 0..8 {
                acc += q.at(0, 0, i, d) * k.at(0, 0, j, d);
            }
            scores[i][j] = acc * scale;
        }
    }
    let mut expected = [[0.0; 8]; 4];
    for i in 0..4 {
        let max = scores[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores[i].iter().map(|s| (s - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for d in 0..8 {
            for j in 0..4 {
                expected[i][d] += exps[j] / sum * v.at(0, 0, j, d);
            }
        }
    }
    let mut tape = Tape::new();
    let (qi, ki, vi) = (tape.constant(q), tape.constant(k), tape.constant(v));
    let out = tape.attention(qi, ki, vi, scale).unwrap();
    for i in 0..4 {
        for d in 0..8 {
            assert!((tape.value(out).at(0, 0, i, d) - expected[i][d]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_dimension_mismatch_errors() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor4::ones([1, 1, 4, 8]));
    let k = tape.constant(Tensor4::ones([1, 1, 4, 6]));
    let v = tape.constant(Tensor4::ones([1, 1, 4, 8]));
    assert!(tape.attention(q, k, v, 1.0).is_err());
}

#[test]
fn forward_determinism_bitwise() {
    let mut r = rng(37);
    let xv = random_tensor(&mut r, [1, 4, 8, 8]);
    let wv = random_tensor(&mut r, [4, 1, 3, 3]);
    let run = || {
        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let w = tape.constant(wv.clone());
        let c = tape.conv2d(x, w, None, 1, 1, 4).unwrap();
        let g = tape.gelu(c).unwrap();
        let m = tape.mean_all(g).unwrap();
        tape.value(m).scalar().unwrap()
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor4::from_flat(vec![1.0, 0.0]));
    let b = tape.constant(Tensor4::from_flat(vec![0.0, 0.0]));
    assert!(tape.div(a, b).is_err());
}
