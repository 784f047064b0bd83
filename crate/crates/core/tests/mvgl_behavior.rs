//! Sampling, frequency-accumulation, prior, and guidance-loss oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vrs_core::mvgl::{
    self, accumulate_frequency, base_offset, explicit_prior, prior_from_reference,
    sample_locations, value_map, FrequencyMode, OffsetField, OffsetHead, PriorMap, PriorSource,
    TemperatureSchedule, TopKMaskSet,
};
use vrs_core::param::Param;
use vrs_core::tape::Tape;
use vrs_core::tensor::Tensor4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f64, hi: f64) -> Tensor4 {
    let numel: usize = dims.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor4::new(dims, data).unwrap()
}

fn head(rng: &mut ChaCha8Rng, channels: usize, k: usize, zero_pointwise: bool) -> OffsetHead {
    let pw_dims = [2 * k * k, channels, 1, 1];
    OffsetHead {
        depthwise: Param::new(random_tensor(rng, [channels, 1, 3, 3], -0.3, 0.3)),
        depthwise_bias: Param::new(random_tensor(rng, [1, channels, 1, 1], -0.1, 0.1)),
        pointwise: Param::new(if zero_pointwise {
            Tensor4::zeros(pw_dims)
        } else {
            random_tensor(rng, pw_dims, -0.3, 0.3)
        }),
        pointwise_bias: Param::new(Tensor4::zeros([1, 2 * k * k, 1, 1])),
        k,
    }
}

#[test]
fn zero_initialized_head_predicts_zero_offsets() {
    let mut r = rng(60);
    let h = head(&mut r, 4, 1, true);
    let x = random_tensor(&mut r, [1, 4, 6, 6], -1.0, 1.0);
    let mut tape = Tape::new();
    let xid = tape.constant(x);
    let off = h.predict(&mut tape, xid).unwrap();
    assert!(tape.value(off).data().iter().all(|&v| v == 0.0));
}

#[test]
fn constant_input_gives_spatially_constant_offsets() {
    let mut r = rng(61);
    let h = head(&mut r, 3, 1, false);
    let x = Tensor4::full([1, 3, 8, 8], 0.37);
    let mut tape = Tape::new();
    let xid = tape.constant(x);
    let off = h.predict(&mut tape, xid).unwrap();
    let v = tape.value(off);
    // Interior pixels see identical receptive fields (borders differ from
    // zero padding).
    for ch in 0..2 {
        let center = v.at(0, ch, 4, 4);
        for y in 1..7 {
            for x in 1..7 {
                assert!((v.at(0, ch, y, x) - center).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn offset_head_matches_composed_oracle() {
    let mut r = rng(62);
    let hd = head(&mut r, 4, 1, false);
    let x = random_tensor(&mut r, [1, 4, 8, 8], -1.0, 1.0);
    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let off = hd.predict(&mut tape, xid).unwrap();
    // Composition oracle from the raw tape primitives.
    let mut oracle_tape = Tape::new();
    let xo = oracle_tape.constant(x);
    let w1 = oracle_tape.constant(hd.depthwise.value.clone());
    let b1 = oracle_tape.constant(hd.depthwise_bias.value.clone());
    let c1 = oracle_tape.conv2d(xo, w1, Some(b1), 1, 1, 4).unwrap();
    let g = oracle_tape.gelu(c1).unwrap();
    let w2 = oracle_tape.constant(hd.pointwise.value.clone());
    let b2 = oracle_tape.constant(hd.pointwise_bias.value.clone());
    let c2 = oracle_tape.conv2d(g, w2, Some(b2), 1, 0, 1).unwrap();
    assert!(tape.value(off).max_abs_diff(oracle_tape.value(c2)) < 1e-12);
}

#[test]
fn base_grid_definition() {
    assert_eq!(base_offset(0, 1), (0, 0));
    // k = 3: the nine samples cover the 3x3 neighborhood.
    let offsets: Vec<(isize, isize)> = (0..9).map(|n| base_offset(n, 3)).collect();
    for dy in -1..=1 {
        for dx in -1..=1 {
            assert!(offsets.contains(&(dy, dx)));
        }
    }
}

#[test]
fn sample_locations_identity_shift_and_grid() {
    let zero = OffsetField::new(Tensor4::zeros([1, 2, 3, 4]), 1).unwrap();
    let samples = sample_locations(&zero);
    for (i, &(sy, sx)) in samples[0].iter().enumerate() {
        let (y, x) = (i / 4, i % 4);
        assert_eq!((sy, sx), (y as f64, x as f64));
    }
    // Uniform (+1, 0): every sample shifts one row down.
    let mut shifted = Tensor4::zeros([1, 2, 3, 4]);
    for y in 0..3 {
        for x in 0..4 {
            shifted.set(0, 0, y, x, 1.0);
        }
    }
    let field = OffsetField::new(shifted, 1).unwrap();
    for (i, &(sy, sx)) in sample_locations(&field)[0].iter().enumerate() {
        let (y, x) = (i / 4, i % 4);
        assert_eq!((sy, sx), (y as f64 + 1.0, x as f64));
    }
    // k = 3 with zero offsets samples the 3x3 neighborhood of each pixel.
    let field = OffsetField::new(Tensor4::zeros([1, 18, 2, 2]), 3).unwrap();
    let samples = sample_locations(&field);
    let around_origin: Vec<(f64, f64)> = samples[0][0..9].to_vec();
    for dy in -1..=1 {
        for dx in -1..=1 {
            assert!(around_origin.contains(&(dy as f64, dx as f64)));
        }
    }
}

#[test]
fn hard_count_identity_and_concentration() {
    let zero = OffsetField::new(Tensor4::zeros([1, 2, 4, 5]), 1).unwrap();
    let s = accumulate_frequency(&zero, FrequencyMode::HardCount);
    assert!(s.grid.data().iter().all(|&v| v == 1.0));

    // Aim every sample at (0, 0).
    let mut off = Tensor4::zeros([1, 2, 4, 5]);
    for y in 0..4 {
        for x in 0..5 {
            off.set(0, 0, y, x, -(y as f64));
            off.set(0, 1, y, x, -(x as f64));
        }
    }
    let field = OffsetField::new(off, 1).unwrap();
    let s = accumulate_frequency(&field, FrequencyMode::HardCount);
    assert_eq!(s.grid.at(0, 0, 0, 0), 20.0);
    assert_eq!(s.grid.data().iter().sum::<f64>(), 20.0);
}

#[test]
fn hard_mass_bound_under_random_offsets() {
    let mut r = rng(63);
    for _ in 0..20 {
        let k = r.gen_range(1..4usize);
        let off = random_tensor(&mut r, [1, 2 * k * k, 5, 5], -4.0, 4.0);
        let field = OffsetField::new(off, k).unwrap();
        let hard = accumulate_frequency(&field, FrequencyMode::HardCount);
        let total: f64 = hard.grid.data().iter().sum();
        assert!(total <= (25 * k * k) as f64);
        assert!(hard.grid.data().iter().all(|&v| v >= 0.0 && v.fract() == 0.0));
        let soft = accumulate_frequency(&field, FrequencyMode::SoftSplat);
        let total: f64 = soft.grid.data().iter().sum();
        assert!(total <= (25 * k * k) as f64 + 1e-9);
    }
}

#[test]
fn soft_splat_fractional_offset_splits_mass() {
    // One source pixel, offset (0.5, 0): half mass on each vertical neighbor.
    let mut off = Tensor4::zeros([1, 2, 3, 1]);
    off.set(0, 0, 1, 0, 0.5);
    // Suppress the other two sources by pushing them out of bounds.
    off.set(0, 0, 0, 0, -5.0);
    off.set(0, 0, 2, 0, 5.0);
    let field = OffsetField::new(off, 1).unwrap();
    let s = accumulate_frequency(&field, FrequencyMode::SoftSplat);
    assert!((s.grid.at(0, 0, 1, 0) - 0.5).abs() < 1e-12);
    assert!((s.grid.at(0, 0, 2, 0) - 0.5).abs() < 1e-12);
    assert_eq!(s.grid.at(0, 0, 0, 0), 0.0);
}

#[test]
fn explicit_prior_norms() {
    // One-hot channel per pixel: the norm is the absolute activation.
    let mut f = Tensor4::zeros([1, 3, 2, 2]);
    f.set(0, 0, 0, 0, -2.0);
    f.set(0, 1, 0, 1, 3.0);
    f.set(0, 2, 1, 0, -0.5);
    let p = explicit_prior(&f, PriorSource::External("test".into())).unwrap();
    assert_eq!(p.grid, vec![2.0, 3.0, 0.5, 0.0]);

    let z = explicit_prior(&Tensor4::zeros([1, 4, 3, 3]), PriorSource::ReferenceGradient).unwrap();
    assert!(z.grid.iter().all(|&v| v == 0.0));

    let mut r = rng(64);
    let f = random_tensor(&mut r, [1, 4, 2, 2], -1.0, 1.0);
    let p = explicit_prior(&f, PriorSource::ReferenceGradient).unwrap();
    for y in 0..2 {
        for x in 0..2 {
            let mut acc = 0.0;
            for c in 0..4 {
                acc += f.at(0, c, y, x) * f.at(0, c, y, x);
            }
            assert!((p.grid[y * 2 + x] - acc.sqrt()).abs() < 1e-12);
        }
    }
    let mut bad = Tensor4::zeros([1, 1, 2, 2]);
    bad.data_mut()[0] = f64::NAN;
    assert!(explicit_prior(&bad, PriorSource::ReferenceGradient).is_err());
}

#[test]
fn matched_distributions_give_zero_loss() {
    let mut r = rng(65);
    let grid: Vec<f64> = (0..64).map(|_| r.gen_range(0.0..2.0)).collect();
    let prior = PriorMap::new(8, 8, grid.clone(), PriorSource::ReferenceGradient).unwrap();
    // S equal to the upsampled prior (identity here) makes p = q.
    let s = Tensor4::new([1, 1, 8, 8], grid.clone()).unwrap();
    // Epsilon in the log denominator biases each mask's KL down by about
    // eps * popcount, so the matched loss sits just below zero: bounded by
    // the summed mask sizes (16+32+48+64 here).
    let slack = 160.0 * mvgl::KL_EPS + 1e-9;
    for t in [1.0, 0.4] {
        let mut tape = Tape::new();
        let sid = tape.constant(s.clone());
        let loss = mvgl::mvgl_loss(&mut tape, sid, &prior, t, &mvgl::DEFAULT_RATIOS).unwrap();
        let v = tape.value(loss).scalar().unwrap();
        assert!(v <= 1e-6 && v >= -slack, "matched loss {v}");
    }
    // A constant shift of S leaves the softmax unchanged.
    let shifted = s.map(|v| v + 3.7);
    let mut tape = Tape::new();
    let sid = tape.constant(shifted);
    let loss = mvgl::mvgl_loss(&mut tape, sid, &prior, 1.0, &mvgl::DEFAULT_RATIOS).unwrap();
    let v = tape.value(loss).scalar().unwrap();
    assert!(v <= 1e-6 && v >= -slack);
}

#[test]
fn toy_two_pixel_kl_value() {
    // q = [0.5, 0.5], p = [0.25, 0.75] under a single full mask.
    let prior = PriorMap::new(1, 2, vec![0.0, 0.0], PriorSource::ReferenceGradient).unwrap();
    let s = Tensor4::new([1, 1, 1, 2], vec![0.25f64.ln(), 0.75f64.ln()]).unwrap();
    let mut tape = Tape::new();
    let sid = tape.constant(s);
    let loss = mvgl::mvgl_loss(&mut tape, sid, &prior, 1.0, &[1.0]).unwrap();
    let v = tape.value(loss).scalar().unwrap();
    assert!((v - 0.14384).abs() < 1e-5, "toy KL {v}");
}

#[test]
fn full_ratio_reduces_to_plain_kl() {
    let mut r = rng(66);
    let grid: Vec<f64> = (0..16).map(|_| r.gen_range(0.1..1.0)).collect();
    let prior = PriorMap::new(4, 4, grid, PriorSource::ReferenceGradient).unwrap();
    let s = random_tensor(&mut r, [1, 1, 4, 4], -1.0, 1.0);
    let t = 0.7;
    let mut tape = Tape::new();
    let sid = tape.constant(s.clone());
    let loss = mvgl::mvgl_loss(&mut tape, sid, &prior, t, &[1.0]).unwrap();
    // Direct unmasked KL.
    let p = mvgl::softmax_temp_values(s.data(), t).unwrap();
    let q = mvgl::softmax_temp_values(&prior.upsampled(4, 4), t).unwrap();
    let direct: f64 = q
        .iter()
        .zip(&p)
        .map(|(&qv, &pv)| qv * (qv.ln() - (pv + mvgl::KL_EPS).ln()))
        .sum();
    assert!((tape.value(loss).scalar().unwrap() - direct).abs() < 1e-12);
}

#[test]
fn loss_is_nonnegative_up_to_eps_slack() {
    let mut r = rng(67);
    for _ in 0..30 {
        let grid: Vec<f64> = (0..36).map(|_| r.gen_range(0.0..1.0)).collect();
        let prior = PriorMap::new(6, 6, grid, PriorSource::ReferenceGradient).unwrap();
        let s = random_tensor(&mut r, [1, 1, 6, 6], -2.0, 2.0);
        let t = r.gen_range(0.1..1.5);
        let mut tape = Tape::new();
        let sid = tape.constant(s);
        let loss = mvgl::mvgl_loss(&mut tape, sid, &prior, t, &mvgl::DEFAULT_RATIOS).unwrap();
        assert!(tape.value(loss).scalar().unwrap() >= -4.0 * 1e-6);
    }
}

#[test]
fn invalid_parameters_are_rejected() {
    let prior = PriorMap::new(2, 2, vec![0.1; 4], PriorSource::ReferenceGradient).unwrap();
    let s = Tensor4::ones([1, 1, 2, 2]);
    let mut tape = Tape::new();
    let sid = tape.constant(s);
    assert!(mvgl::mvgl_loss(&mut tape, sid, &prior, 0.0, &[1.0]).is_err());
    assert!(mvgl::mvgl_loss(&mut tape, sid, &prior, -0.5, &[1.0]).is_err());
    assert!(mvgl::mvgl_loss(&mut tape, sid, &prior, 1.0, &[0.0]).is_err());
}

#[test]
fn temperature_schedule_points() {
    let sched = TemperatureSchedule::new(1000);
    assert_eq!(sched.at(0), 1.0);
    assert_eq!(sched.at(1000), 0.1);
    assert_eq!(sched.at(5000), 0.1);
    assert!((sched.at(500) - 0.55).abs() < 1e-12);
    // Non-increasing and linear on the ramp.
    let mut prev = f64::INFINITY;
    for i in 0..=1000 {
        let t = sched.at(i);
        assert!(t <= prev + 1e-15);
        prev = t;
    }
}

#[test]
fn masks_are_nested_with_exact_popcounts() {
    let mut r = rng(68);
    for _ in 0..20 {
        let n = r.gen_range(5..80);
        let q: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let set = TopKMaskSet::build(&q, &mvgl::DEFAULT_RATIOS).unwrap();
        for (i, ratio) in mvgl::DEFAULT_RATIOS.iter().enumerate() {
            assert_eq!(set.masks[i].len(), (ratio * n as f64).ceil() as usize);
            if i > 0 {
                for idx in &set.masks[i - 1] {
                    assert!(set.masks[i].contains(idx), "masks must nest");
                }
            }
        }
        assert_eq!(set.masks.last().unwrap().len(), n);
    }
    // Ties resolve by raster index.
    let q = vec![0.5; 8];
    let set = TopKMaskSet::build(&q, &[0.25, 0.5]).unwrap();
    assert_eq!(set.masks[0], vec![0, 1]);
    assert_eq!(set.masks[1], vec![0, 1, 2, 3]);
}

#[test]
fn value_map_passthrough_and_locality() {
    let zero = OffsetField::new(Tensor4::zeros([1, 2, 4, 4]), 1).unwrap();
    let s = accumulate_frequency(&zero, FrequencyMode::SoftSplat);
    let v = value_map(&s);
    assert_eq!(v.data(), s.grid.data());
    assert!(v.data().iter().all(|&x| x == 1.0));

    // Perturbing one pixel's offsets only moves local mass (4-neighbor
    // support at the old and new sample positions).
    let mut r = rng(69);
    let off = random_tensor(&mut r, [1, 2, 5, 5], -0.4, 0.4);
    let field = OffsetField::new(off.clone(), 1).unwrap();
    let base = value_map(&accumulate_frequency(&field, FrequencyMode::SoftSplat));
    let mut off2 = off;
    off2.set(0, 0, 2, 2, off2.at(0, 0, 2, 2) + 0.3);
    off2.set(0, 1, 2, 2, off2.at(0, 1, 2, 2) - 0.2);
    let field2 = OffsetField::new(off2, 1).unwrap();
    let new = value_map(&accumulate_frequency(&field2, FrequencyMode::SoftSplat));
    let mut changed = Vec::new();
    for i in 0..25 {
        if (base.data()[i] - new.data()[i]).abs() > 1e-12 {
            changed.push((i / 5, i % 5));
        }
    }
    assert!(changed.len() <= 8, "{changed:?}");
    for (y, x) in changed {
        assert!((y as isize - 2).abs() <= 2 && (x as isize - 2).abs() <= 2);
    }
}

#[test]
fn reference_prior_shape_and_edges() {
    // Constant image: all-zero prior, no panic.
    let flat = Tensor4::full([1, 3, 40, 40], 0.5);
    let p = prior_from_reference(&flat).unwrap();
    assert_eq!((p.h, p.w), (16, 16));
    assert!(p.grid.iter().all(|&v| v == 0.0));

    // A vertical step edge concentrates pooled mass in the edge column.
    let step = Tensor4::from_fn([1, 3, 32, 32], |_, _, _, x| if x < 16 { 0.1 } else { 0.9 });
    let p = prior_from_reference(&step).unwrap();
    assert_eq!((p.h, p.w), (16, 16));
    // Edge falls between pooled columns 7 and 8.
    let col_sum = |c: usize| -> f64 { (0..16).map(|row| p.grid[row * 16 + c]).sum() };
    let edge_mass = col_sum(7) + col_sum(8);
    let rest: f64 = (0..16)
        .filter(|&c| c != 7 && c != 8)
        .map(col_sum)
        .sum();
    assert!(edge_mass > rest * 10.0, "edge {edge_mass}, rest {rest}");

    // Arbitrary extents still produce 16x16.
    let odd = Tensor4::from_fn([1, 3, 37, 23], |_, c, y, x| ((c + y + x) % 5) as f64 * 0.2);
    assert_eq!({
        let p = prior_from_reference(&odd).unwrap();
        (p.h, p.w)
    }, (16, 16));
}
