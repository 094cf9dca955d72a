mod common;

use common::{digamma_oracle, entropy_oracle, ln_gamma_oracle};
use proptest::prelude::*;
use shiftguard::numerics::{digamma, entropy, log_gamma, softmax2, trigamma, Epsilon, ProbabilityVector};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[test]
fn ln_gamma_matches_shifted_stirling_oracle() {
    for i in 1..=400 {
        let x = i as f64 * 0.05;
        let got = log_gamma(x).unwrap();
        let want = ln_gamma_oracle(x);
        assert!(
            (got - want).abs() < 1e-9 * want.abs().max(1.0),
            "x={x}: {got} vs {want}"
        );
    }
}

#[test]
fn digamma_matches_shifted_series_oracle() {
    for i in 1..=400 {
        let x = i as f64 * 0.05;
        let got = digamma(x).unwrap();
        let want = digamma_oracle(x);
        assert!(
            (got - want).abs() < 1e-9 * want.abs().max(1.0),
            "x={x}: {got} vs {want}"
        );
    }
}

#[test]
fn closed_form_values() {
    assert!((digamma(1.0).unwrap() + EULER_GAMMA).abs() < 1e-12);
    assert!((digamma(0.5).unwrap() + EULER_GAMMA + 2.0 * 2f64.ln()).abs() < 1e-12);
    assert!((log_gamma(0.5).unwrap() - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    assert!((log_gamma(10.0).unwrap() - 362_880f64.ln()).abs() < 1e-10);
    assert!((trigamma(0.5).unwrap() - std::f64::consts::PI.powi(2) / 2.0).abs() < 1e-10);
}

#[test]
fn trigamma_matches_difference_of_digamma() {
    for i in 1..=100 {
        let x = i as f64 * 0.2;
        let h = 1e-5;
        let fd = (digamma_oracle(x + h) - digamma_oracle(x - h)) / (2.0 * h);
        let got = trigamma(x).unwrap();
        assert!((got - fd).abs() < 1e-6 * got.abs().max(1.0), "x={x}");
    }
}

#[test]
fn entropy_matches_oracle_and_clamps_zeros() {
    let eps = Epsilon::default();
    for p in [0.0, 1e-15, 0.1, 0.25, 0.5, 0.9, 1.0] {
        let v = ProbabilityVector::new(p, 1.0 - p).unwrap();
        assert!((entropy(&v, eps) - entropy_oracle(p)).abs() < 1e-10, "p={p}");
    }
}

proptest! {
    #[test]
    fn digamma_recurrence(x in 0.01f64..50.0) {
        let lhs = digamma(x + 1.0).unwrap();
        let rhs = digamma(x).unwrap() + 1.0 / x;
        prop_assert!((lhs - rhs).abs() < 1e-10 * rhs.abs().max(1.0));
    }

    #[test]
    fn ln_gamma_recurrence(x in 0.01f64..50.0) {
        let lhs = log_gamma(x + 1.0).unwrap();
        let rhs = log_gamma(x).unwrap() + x.ln();
        prop_assert!((lhs - rhs).abs() < 1e-10 * rhs.abs().max(1.0));
    }

    #[test]
    fn entropy_is_bounded(p in 0.0f64..=1.0) {
        let h = entropy(&ProbabilityVector::new(p, 1.0 - p).unwrap(), Epsilon::default());
        prop_assert!(h >= 0.0);
        prop_assert!(h <= std::f64::consts::LN_2 + 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(a in -700.0f64..700.0, b in -700.0f64..700.0) {
        let p = softmax2([a, b]);
        prop_assert!(p[0] >= 0.0 && p[1] >= 0.0);
        prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        prop_assert_eq!(p[0] >= p[1], a >= b);
    }
}
