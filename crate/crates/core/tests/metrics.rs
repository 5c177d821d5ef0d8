use ode_depth::metrics::{evaluate, DepthMetrics, MetricSums};
use ode_depth::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive(pred: &[f64], gt: &[f64], mask: &[f64]) -> [f64; 7] {
    let mut n = 0.0;
    let mut acc = [0.0; 7];
    for i in 0..pred.len() {
        if mask[i] == 0.0 {
            continue;
        }
        let (d, t) = (pred[i], gt[i]);
        n += 1.0;
        acc[0] += (d - t).abs() / t;
        acc[1] += (d - t) * (d - t) / t;
        acc[2] += (d - t) * (d - t);
        acc[3] += (d.ln() - t.ln()) * (d.ln() - t.ln());
        let r = if d / t > t / d { d / t } else { t / d };
        acc[4] += if r < 1.25 { 1.0 } else { 0.0 };
        acc[5] += if r < 1.5625 { 1.0 } else { 0.0 };
        acc[6] += if r < 1.953125 { 1.0 } else { 0.0 };
    }
    [
        acc[0] / n,
        acc[1] / n,
        (acc[2] / n).sqrt(),
        (acc[3] / n).sqrt(),
        100.0 * acc[4] / n,
        100.0 * acc[5] / n,
        100.0 * acc[6] / n,
    ]
}

fn as_array(m: &DepthMetrics) -> [f64; 7] {
    [m.abs_rel, m.sq_rel, m.rmse, m.rms_log, m.delta1, m.delta2, m.delta3]
}

fn maps(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..20.0)).collect();
    let pred = gt.iter().map(|g| g * rng.random_range(0.4..2.5)).collect();
    let mask = (0..n).map(|_| if rng.random_bool(0.8) { 1.0 } else { 0.0 }).collect();
    (pred, gt, mask)
}

fn t(v: &[f64]) -> Tensor<f64> {
    Tensor::new(&[1, 1, 1, v.len()], v.to_vec()).unwrap()
}

#[test]
fn agrees_with_naive_loop() {
    for seed in 0..10 {
        let (p, g, m) = maps(seed, 4096);
        let got = as_array(&evaluate(&t(&p), &t(&g), &t(&m)).unwrap());
        let want = naive(&p, &g, &m);
        for k in 0..7 {
            assert!((got[k] - want[k]).abs() <= 1e-12, "seed {seed} metric {k}: {} vs {}", got[k], want[k]);
        }
    }
}

#[test]
fn power_of_two_scale_gives_exact_abs_rel() {
    let (_, g, _) = maps(3, 1000);
    for alpha in [0.25, 0.5, 2.0, 4.0] {
        let p: Vec<f64> = g.iter().map(|v| v * alpha).collect();
        let m = evaluate(&t(&p), &t(&g), &t(&vec![1.0; g.len()])).unwrap();
        assert_eq!(m.abs_rel, (alpha - 1.0f64).abs());
    }
}

#[test]
fn pooled_sums_equal_a_single_evaluation() {
    let (p, g, m) = maps(7, 2000);
    let mut a = MetricSums::default();
    a.add(&t(&p[..900]), &t(&g[..900]), &t(&m[..900])).unwrap();
    let mut b = MetricSums::default();
    b.add(&t(&p[900..]), &t(&g[900..]), &t(&m[900..])).unwrap();
    a.merge(&b);
    let whole = evaluate(&t(&p), &t(&g), &t(&m)).unwrap();
    let pooled = a.finish().unwrap();
    for (x, y) in as_array(&whole).iter().zip(as_array(&pooled)) {
        assert!((x - y).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn scale_awareness(alpha in 0.05..20.0f64, seed in 0u64..100) {
        let (_, g, _) = maps(seed, 200);
        let p: Vec<f64> = g.iter().map(|v| v * alpha).collect();
        let m = evaluate(&t(&p), &t(&g), &t(&vec![1.0; g.len()])).unwrap();
        prop_assert!((m.abs_rel - (alpha - 1.0).abs()).abs() <= 1e-12 * alpha.max(1.0));
    }

    #[test]
    fn deltas_are_monotone_and_permutation_invariant(seed in 0u64..1000) {
        let (p, g, m) = maps(seed, 300);
        let a = evaluate(&t(&p), &t(&g), &t(&m)).unwrap();
        prop_assert!(a.delta1 <= a.delta2 && a.delta2 <= a.delta3 && a.delta3 <= 100.0);
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
        let perm = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let b = evaluate(&t(&perm(&p)), &t(&perm(&g)), &t(&perm(&m))).unwrap();
        for (x, y) in as_array(&a).iter().zip(as_array(&b)) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}
