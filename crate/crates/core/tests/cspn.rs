use ode_depth::cspn::{normalize_affinity, run_cspn, CspnVariant, PropagationConfig, SensorDepth};
use ode_depth::sphere::EquirectGrid;
use ode_depth::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(variant: CspnVariant, iterations: usize) -> PropagationConfig {
    PropagationConfig { iterations, ..PropagationConfig::new(variant) }
}

fn smooth_depth(h: usize, w: usize) -> Tensor<f64> {
    let g = EquirectGrid::new(h, w).unwrap();
    Tensor::from_fn(&[1, 1, h, w], |q| {
        let [x, y, z] = g.pixel_to_sphere((q / w) as f64, (q % w) as f64).unit_vector();
        3.0 + 0.5 * x + 0.3 * y - 0.4 * z
    })
    .unwrap()
}

fn random_raw(h: usize, w: usize, lo: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, 8, h, w], |_| rng.random_range(lo..1.0)).unwrap()
}

fn check_affinity_invariants(raw: &Tensor<f64>) {
    let a = normalize_affinity(raw).unwrap();
    let (_, m, h, w) = raw.dims4().unwrap();
    let p = h * w;
    for pix in 0..p {
        let abs: f64 = (0..m).map(|t| a.kappa.data()[t * p + pix].abs()).sum();
        let sum: f64 = (0..m).map(|t| a.kappa.data()[t * p + pix]).sum();
        assert!(abs <= 1.0 + 1e-12, "pixel {pix}: Σ|κ| = {abs}");
        assert!((a.center.data()[pix] - (1.0 - sum)).abs() <= 1e-15, "pixel {pix}");
        let raw_abs: f64 = (0..m).map(|t| raw.data()[t * p + pix].abs()).sum();
        if raw_abs == 0.0 {
            assert_eq!(a.center.data()[pix], 1.0);
            assert!((0..m).all(|t| a.kappa.data()[t * p + pix] == 0.0));
        }
    }
}

#[test]
fn affinity_invariants_on_1e5_pixels() {
    let (h, w) = (250, 400);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut raw: Tensor<f64> = Tensor::from_fn(&[1, 8, h, w], |_| rng.random_range(-3.0..3.0)).unwrap();
    let p = h * w;
    for pix in (0..p).step_by(97) {
        for t in 0..8 {
            raw.data_mut()[t * p + pix] = 0.0;
        }
    }
    for pix in (0..p).step_by(89) {
        for t in 0..8 {
            raw.data_mut()[t * p + pix] = -raw.data()[t * p + pix].abs();
        }
    }
    check_affinity_invariants(&raw);
}

proptest! {
    #[test]
    fn affinity_invariants_hold(vals in prop::collection::vec(
        prop_oneof![Just(0.0), -1e3..1e3f64, -1e-6..1e-6f64], 8 * 6)) {
        let raw = Tensor::new(&[1, 8, 2, 3], vals).unwrap();
        check_affinity_invariants(&raw);
    }

    #[test]
    fn constant_map_is_a_fixed_point(c in 0.5..10.0f64, seed in 0u64..1000) {
        let (h, w) = (8, 16);
        let h0 = Tensor::full(&[1, 1, h, w], c).unwrap();
        let raw = random_raw(h, w, -1.0, seed);
        for v in [CspnVariant::Cspn, CspnVariant::Ig] {
            let out = run_cspn(&h0, &raw, None, None, config(v, 4)).unwrap();
            for &x in out.data() {
                prop_assert!((x - c).abs() <= 1e-12 * c);
            }
        }
    }
}

#[test]
fn nonnegative_affinities_keep_values_bounded() {
    let (h, w) = (16, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h0 = Tensor::from_fn(&[1, 1, h, w], |_| rng.random_range(1.0..5.0)).unwrap();
    let (lo, hi) = h0.min_max();
    for v in [CspnVariant::Cspn, CspnVariant::Ig] {
        let out = run_cspn(&h0, &random_raw(h, w, 0.0, 12), None, None, config(v, 12)).unwrap();
        for &x in out.data() {
            assert!(x >= lo - 1e-12 && x <= hi + 1e-12, "{v}: {x} outside [{lo}, {hi}]");
        }
    }
}

fn neighbor(i: i64, j: i64, h: usize, w: usize) -> (usize, usize) {
    let (h, w) = (h as i64, w as i64);
    let (r, shift) = if i < 0 {
        (-1 - i, w / 2)
    } else if i >= h {
        (2 * h - 1 - i, w / 2)
    } else {
        (i, 0)
    };
    (r as usize, (j + shift).rem_euclid(w) as usize)
}

#[test]
fn vanilla_step_matches_eight_neighbor_loop() {
    let (h, w) = (9, 18);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let h0 = Tensor::from_fn(&[1, 1, h, w], |_| rng.random_range(0.5..4.0)).unwrap();
    let raw = random_raw(h, w, -1.0, 22);
    let out = run_cspn(&h0, &raw, None, None, config(CspnVariant::Cspn, 1)).unwrap();
    let p = h * w;
    for i in 0..h {
        for j in 0..w {
            let pix = i * w + j;
            let s: f64 = (0..8).map(|t| raw.data()[t * p + pix].abs()).sum();
            let mut acc = 0.0;
            let mut wsum = 0.0;
            let mut t = 0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let kap = raw.data()[t * p + pix] / s;
                    let (r, c) = neighbor(i as i64 + di, j as i64 + dj, h, w);
                    acc += kap * h0.data()[r * w + c];
                    wsum += kap;
                    t += 1;
                }
            }
            acc += (1.0 - wsum) * h0.data()[pix];
            assert!((out.data()[pix] - acc).abs() <= 1e-12, "({i},{j}): {} vs {acc}", out.data()[pix]);
        }
    }
}

fn front_sensor(depth: &Tensor<f64>) -> SensorDepth<f64> {
    let (_, _, h, w) = depth.dims4().unwrap();
    let dp = Tensor::from_fn(depth.shape(), |q| {
        let (i, j) = (q / w, q % w);
        if (h / 3..2 * h / 3).contains(&i) && (w / 3..2 * w / 3).contains(&j) {
            depth.data()[q] + 0.25
        } else {
            0.0
        }
    })
    .unwrap();
    SensorDepth::from_depth(dp)
}

#[test]
fn zero_offset_d_cspn_equals_ig_cspn() {
    let (h, w) = (16, 32);
    let h0 = smooth_depth(h, w);
    let raw = random_raw(h, w, -1.0, 31);
    let sensor = front_sensor(&h0);
    let zero = Tensor::zeros(&[1, 16, h, w]).unwrap();
    let ig = run_cspn(&h0, &raw, None, Some(&sensor), config(CspnVariant::Ig, 12)).unwrap();
    let d = run_cspn(&h0, &raw, Some(&zero), Some(&sensor), config(CspnVariant::D, 12)).unwrap();
    assert_eq!(ig.data(), d.data());
}

#[test]
fn ig_matches_vanilla_near_the_equator() {
    let (h, w) = (256, 512);
    let h0 = smooth_depth(h, w);
    let raw = random_raw(h, w, -1.0, 41);
    let a = run_cspn(&h0, &raw, None, None, config(CspnVariant::Cspn, 3)).unwrap();
    let b = run_cspn(&h0, &raw, None, None, config(CspnVariant::Ig, 3)).unwrap();
    let mut worst: f64 = 0.0;
    for i in h / 2 - 2..h / 2 + 2 {
        for j in 0..w {
            worst = worst.max((a.data()[i * w + j] - b.data()[i * w + j]).abs());
        }
    }
    assert!(worst <= 1e-2, "max equator deviation {worst}");
}

#[test]
fn replacement_is_exact_for_every_variant() {
    let (h, w) = (12, 24);
    let h0 = smooth_depth(h, w);
    let raw = random_raw(h, w, -1.0, 51);
    let sensor = front_sensor(&h0);
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let off = Tensor::from_fn(&[1, 16, h, w], |_| rng.random_range(-1.5..1.5)).unwrap();
    for (v, o) in [(CspnVariant::Cspn, None), (CspnVariant::Ig, None), (CspnVariant::D, Some(&off))] {
        let out = run_cspn(&h0, &raw, o, Some(&sensor), config(v, 12)).unwrap();
        let mut hits = 0;
        for q in 0..h * w {
            if sensor.mask.data()[q] > 0.0 {
                assert_eq!(out.data()[q].to_bits(), sensor.dp.data()[q].to_bits());
                hits += 1;
            }
        }
        assert!(hits > 0);
    }
}
