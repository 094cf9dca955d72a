mod common;

use common::{beta_kl_quadrature, digamma_oracle, entropy_oracle, rng};
use proptest::prelude::*;
use rand::Rng;
use shiftguard::models::{dirichlet_reverse_kl, DirichletParams, EnsembleOutput};
use shiftguard::numerics::{Epsilon, ProbabilityVector};
use shiftguard::uncertainty::{dirichlet_probabilities, dirichlet_uncertainty, ensemble_uncertainty};

fn members(ps: &[f64]) -> EnsembleOutput {
    EnsembleOutput::from_members(
        ps.iter()
            .map(|&p| ProbabilityVector::new(p, 1.0 - p).unwrap())
            .collect(),
    )
    .unwrap()
}

#[test]
fn ensemble_triple_matches_direct_computation() {
    let mut r = rng(21);
    for _ in 0..500 {
        let m = r.random_range(2..12);
        let ps: Vec<f64> = (0..m).map(|_| r.random::<f64>()).collect();
        let u = ensemble_uncertainty(&members(&ps), Epsilon::default()).unwrap();
        let expected = ps.iter().map(|&p| entropy_oracle(p)).sum::<f64>() / m as f64;
        let mean = ps.iter().sum::<f64>() / m as f64;
        assert!((u.expected_entropy - expected).abs() < 1e-9);
        assert!((u.entropy_of_expected - entropy_oracle(mean)).abs() < 1e-9);
    }
}

#[test]
fn dirichlet_expected_entropy_matches_digamma_oracle() {
    let mut r = rng(22);
    for _ in 0..200 {
        let a = [r.random_range(0.05..50.0), r.random_range(0.05..50.0)];
        let a0 = a[0] + a[1];
        let want: f64 = -a
            .iter()
            .map(|&ak| ak / a0 * (digamma_oracle(ak + 1.0) - digamma_oracle(a0 + 1.0)))
            .sum::<f64>();
        let u = dirichlet_uncertainty(&DirichletParams::new(a).unwrap(), Epsilon::default());
        assert!((u.expected_entropy - want).abs() < 1e-9, "{a:?}");
    }
}

#[test]
fn dirichlet_expected_entropy_matches_monte_carlo() {
    // E[H(π)] under Beta(a, b), estimated by quadrature over π.
    let a = [2.5, 4.0];
    let u = dirichlet_uncertainty(&DirichletParams::new(a).unwrap(), Epsilon::default());
    let z = common::simpson(|x| x.powf(a[0] - 1.0) * (1.0 - x).powf(a[1] - 1.0), 0.0, 1.0, 20_000);
    let e = common::simpson(
        |x| x.powf(a[0] - 1.0) * (1.0 - x).powf(a[1] - 1.0) * entropy_oracle(x),
        0.0,
        1.0,
        20_000,
    ) / z;
    assert!((u.expected_entropy - e).abs() < 1e-6, "{} vs {e}", u.expected_entropy);
}

#[test]
fn reverse_kl_matches_quadrature() {
    let mut r = rng(23);
    for _ in 0..6 {
        let a = [r.random_range(2.0..15.0), r.random_range(2.0..15.0)];
        let b = [r.random_range(2.0..15.0), r.random_range(2.0..15.0)];
        let got = dirichlet_reverse_kl(&DirichletParams::new(a).unwrap(), &DirichletParams::new(b).unwrap());
        let want = beta_kl_quadrature(a, b);
        assert!(
            (got - want).abs() < 1e-6 * want.max(1.0),
            "{a:?} {b:?}: {got} vs {want}"
        );
    }
}

#[test]
fn knowledge_uncertainty_falls_with_concentration() {
    let mut prev = f64::INFINITY;
    for c in [1.0, 10.0, 100.0, 1000.0] {
        let u = dirichlet_uncertainty(&DirichletParams::new([c, c]).unwrap(), Epsilon::default());
        assert!(u.knowledge_uncertainty < prev);
        prev = u.knowledge_uncertainty;
    }
}

proptest! {
    #[test]
    fn ensemble_identity_and_jensen(ps in prop::collection::vec(0.0f64..=1.0, 1..16)) {
        let u = ensemble_uncertainty(&members(&ps), Epsilon::default()).unwrap();
        prop_assert!((u.knowledge_uncertainty - (u.entropy_of_expected - u.expected_entropy)).abs() < 1e-12);
        prop_assert!(u.knowledge_uncertainty >= -1e-9);
    }

    #[test]
    fn identical_members_carry_no_knowledge_uncertainty(p in 0.0f64..=1.0, m in 1usize..12) {
        let u = ensemble_uncertainty(&members(&vec![p; m]), Epsilon::default()).unwrap();
        prop_assert_eq!(u.knowledge_uncertainty, 0.0);
    }

    #[test]
    fn dirichlet_triple_is_consistent(a in 0.01f64..1e4, b in 0.01f64..1e4) {
        let d = DirichletParams::new([a, b]).unwrap();
        let u = dirichlet_uncertainty(&d, Epsilon::default());
        let p = dirichlet_probabilities(&d);
        prop_assert!((p.benign() - a / (a + b)).abs() < 1e-12);
        prop_assert!(u.expected_entropy >= 0.0);
        prop_assert!(u.entropy_of_expected <= std::f64::consts::LN_2 + 1e-12);
        prop_assert!(u.knowledge_uncertainty >= -1e-9);
    }

    #[test]
    fn reverse_kl_is_nonnegative(a in 0.1f64..100.0, b in 0.1f64..100.0, c in 0.1f64..100.0, d in 0.1f64..100.0) {
        let kl = dirichlet_reverse_kl(&DirichletParams::new([a, b]).unwrap(), &DirichletParams::new([c, d]).unwrap());
        prop_assert!(kl >= -1e-9);
    }
}
