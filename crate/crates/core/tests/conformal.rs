mod common;

use common::{ks_uniform, rng};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use shiftguard::conformal::{calibration_from_scores, ice_decide, p_value, NcmKind, PValueMode};

/// Continuous nonconformity scores that depend on the class, drawn i.i.d.
fn scores(seed: u64, n: usize) -> (Vec<f64>, Vec<u8>) {
    let mut r = rng(seed);
    let dist = [Normal::new(0.0, 1.0).unwrap(), Normal::new(1.5, 2.0).unwrap()];
    let labels: Vec<u8> = (0..n).map(|_| u8::from(r.random::<bool>())).collect();
    let s = labels.iter().map(|&y| dist[y as usize].sample(&mut r)).collect();
    (s, labels)
}

#[test]
fn label_conditional_p_values_are_uniform() {
    let (cal_s, cal_y) = scores(31, 2000);
    let (test_s, test_y) = scores(32, 2000);
    let calib = calibration_from_scores(&cal_s, &cal_y, NcmKind::NegPredictedProbability).unwrap();
    for class in 0..2u8 {
        let ps: Vec<f64> = test_s
            .iter()
            .zip(&test_y)
            .filter(|(_, &y)| y == class)
            .map(|(&s, _)| p_value(&calib, class, s).unwrap())
            .collect();
        // The calibration set is itself a finite sample, so the p-values of
        // a fixed calibration set deviate from uniform by a two-sample KS
        // amount. 1.95 is the 0.1% critical coefficient.
        let n = ps.len() as f64;
        let m = calib.group(class).len() as f64;
        let critical = 1.95 * ((n + m) / (n * m)).sqrt();
        let ks = ks_uniform(&ps);
        assert!(ks < critical, "class {class}: {ks} >= {critical}");
    }
    for tau in [0.05, 0.1, 0.2] {
        let rejected = test_s
            .iter()
            .zip(&test_y)
            .filter(|(&s, &y)| !ice_decide(p_value(&calib, y, s).unwrap(), tau))
            .count();
        let rate = rejected as f64 / test_s.len() as f64;
        assert!((rate - tau).abs() < 0.03, "tau={tau}: {rate}");
    }
}

#[test]
fn smoothed_p_values_dominate_exact_ones() {
    let (s, y) = scores(33, 200);
    let exact = calibration_from_scores(&s, &y, NcmKind::ExpectedEntropy).unwrap();
    let smooth = exact.clone().with_mode(PValueMode::Smoothed);
    for a in [-10.0, -1.0, 0.0, 0.5, 2.0, 10.0] {
        for c in 0..2 {
            let pe = p_value(&exact, c, a).unwrap();
            let ps = p_value(&smooth, c, a).unwrap();
            assert!(ps > 0.0);
            assert!(ps >= pe || (pe - ps) < 1.0 / exact.group(c).len() as f64);
        }
    }
}

proptest! {
    #[test]
    fn p_value_is_a_nonincreasing_fraction(
        cal in prop::collection::vec(-50.0f64..50.0, 1..80),
        a in -60.0f64..60.0,
        b in -60.0f64..60.0,
    ) {
        let labels = vec![0u8; cal.len()];
        let mut with_both = cal.clone();
        with_both.push(0.0);
        let mut l2 = labels.clone();
        l2.push(1);
        let calib = calibration_from_scores(&with_both, &l2, NcmKind::NegPredictedProbability).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let p_lo = p_value(&calib, 0, lo).unwrap();
        let p_hi = p_value(&calib, 0, hi).unwrap();
        prop_assert!((0.0..=1.0).contains(&p_lo));
        prop_assert!(p_hi <= p_lo);
        let n = cal.len() as f64;
        let direct = cal.iter().filter(|&&x| x >= lo).count() as f64 / n;
        prop_assert_eq!(p_lo, direct);
    }
}
