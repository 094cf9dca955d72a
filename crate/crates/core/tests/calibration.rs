mod common;

use common::{brute_force_isotonic, nll_oracle, rng};
use proptest::prelude::*;
use rand::Rng;
use shiftguard::calibration::{
    apply_isotonic, apply_temperature, fit_isotonic, fit_temperature, temperature_nll, DEFAULT_T_MAX, DEFAULT_T_MIN,
};
use shiftguard::numerics::softmax2;

fn random_instance(r: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<u8>) {
    // Distinct sorted scores.
    let mut scores: Vec<f64> = (0..n).map(|i| i as f64 + r.random::<f64>() * 0.5).collect();
    scores.sort_by(f64::total_cmp);
    let labels = (0..n).map(|_| u8::from(r.random::<bool>())).collect();
    (scores, labels)
}

#[test]
fn pava_equals_brute_force_projection() {
    let mut r = rng(11);
    for trial in 0..500 {
        let n = 2 + trial % 7;
        let (scores, labels) = random_instance(&mut r, n);
        let map = fit_isotonic(&scores, &labels).unwrap();
        let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let want = brute_force_isotonic(&y);
        for (i, &s) in scores.iter().enumerate() {
            assert!((apply_isotonic(&map, s) - want[i]).abs() < 1e-9, "trial {trial}");
        }
    }
}

#[test]
fn isotonic_reduces_squared_error_against_any_monotone_step() {
    let mut r = rng(12);
    let (scores, labels) = random_instance(&mut r, 60);
    let map = fit_isotonic(&scores, &labels).unwrap();
    let sse = |f: &dyn Fn(usize) -> f64| (0..60).map(|i| (f(i) - labels[i] as f64).powi(2)).sum::<f64>();
    let best = sse(&|i| apply_isotonic(&map, scores[i]));
    for cut in 0..=60 {
        for (lo, hi) in [(0.0, 1.0), (0.2, 0.8), (0.5, 0.5)] {
            assert!(best <= sse(&|i| if i < cut { lo } else { hi }) + 1e-12);
        }
    }
}

/// Logits whose softmax is calibrated by construction, and labels drawn
/// from it.
fn calibrated_sample(seed: u64, n: usize) -> (Vec<[f64; 2]>, Vec<u8>) {
    let mut r = rng(seed);
    let mut logits = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let z = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
        let p = softmax2(z);
        labels.push(u8::from(r.random::<f64>() < p[1]));
        logits.push(z);
    }
    (logits, labels)
}

#[test]
fn temperature_recovers_scaling() {
    let (base, labels) = calibrated_sample(5, 20_000);
    for t0 in [0.5, 2.0, 5.0] {
        let scaled: Vec<[f64; 2]> = base.iter().map(|z| [z[0] * t0, z[1] * t0]).collect();
        let t = fit_temperature(&scaled, &labels, (DEFAULT_T_MIN, DEFAULT_T_MAX))
            .unwrap()
            .value();
        assert!((t - t0).abs() < 0.05 * t0, "T0={t0}: got {t}");
    }
}

#[test]
fn temperature_is_globally_optimal_on_a_dense_grid() {
    let (base, labels) = calibrated_sample(6, 2000);
    for t0 in [0.3, 1.0, 4.0] {
        let scaled: Vec<[f64; 2]> = base.iter().map(|z| [z[0] * t0, z[1] * t0]).collect();
        let t = fit_temperature(&scaled, &labels, (DEFAULT_T_MIN, DEFAULT_T_MAX))
            .unwrap()
            .value();
        let fitted = nll_oracle(&scaled, &labels, t);
        let grid_min = (0..=9990)
            .map(|i| nll_oracle(&scaled, &labels, 0.01 + i as f64 * 0.001))
            .fold(f64::INFINITY, f64::min);
        assert!(fitted <= grid_min + 1e-9, "T0={t0}: {fitted} > {grid_min}");
    }
}

#[test]
fn nll_matches_direct_formula() {
    let (z, y) = calibrated_sample(7, 300);
    for t in [0.1, 1.0, 3.7] {
        assert!((temperature_nll(&z, &y, t) - nll_oracle(&z, &y, t)).abs() < 1e-10);
    }
}

proptest! {
    #[test]
    fn isotonic_map_is_monotone(
        pts in prop::collection::vec((-100.0f64..100.0, any::<bool>()), 2..60),
        probes in prop::collection::vec(-150.0f64..150.0, 2..20),
    ) {
        let scores: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let labels: Vec<u8> = pts.iter().map(|p| u8::from(p.1)).collect();
        let map = fit_isotonic(&scores, &labels).unwrap();
        let mut probes = probes;
        probes.sort_by(f64::total_cmp);
        let vals: Vec<f64> = probes.iter().map(|&s| apply_isotonic(&map, s)).collect();
        for w in vals.windows(2) {
            prop_assert!(w[0] <= w[1] + 1e-15);
        }
        for v in vals {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn isotonic_preserves_the_label_mean(
        pts in prop::collection::vec((-100.0f64..100.0, any::<bool>()), 2..60),
    ) {
        let scores: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let labels: Vec<u8> = pts.iter().map(|p| u8::from(p.1)).collect();
        let map = fit_isotonic(&scores, &labels).unwrap();
        let fitted: f64 = scores.iter().map(|&s| apply_isotonic(&map, s)).sum();
        let observed: f64 = labels.iter().map(|&l| l as f64).sum();
        prop_assert!((fitted - observed).abs() < 1e-9);
    }

    #[test]
    fn temperature_keeps_the_argmax(a in -20.0f64..20.0, b in -20.0f64..20.0, t in 0.01f64..10.0) {
        let temp = shiftguard::calibration::Temperature::new(t, DEFAULT_T_MIN, DEFAULT_T_MAX).unwrap();
        let p = apply_temperature([a, b], &temp).unwrap();
        if a != b {
            prop_assert_eq!(p.argmax(), u8::from(b > a));
        }
    }
}
