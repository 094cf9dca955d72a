//! Uncertainty decompositions for ensembles and Dirichlet outputs.
//!
//! Both sources yield the same triple: expected entropy (mean per-member or
//! per-draw entropy), entropy of the expected distribution, and knowledge
//! uncertainty, their difference. For a Dirichlet the expected entropy has
//! the closed form −Σ (α_k/α₀)(ψ(α_k+1) − ψ(α₀+1)).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{DirichletParams, EnsembleOutput};
use crate::numerics::{digamma_unchecked, entropy, Epsilon, ProbabilityVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyTriple {
    pub expected_entropy: f64,
    pub entropy_of_expected: f64,
    pub knowledge_uncertainty: f64,
}

impl UncertaintyTriple {
    pub fn from_parts(expected_entropy: f64, entropy_of_expected: f64) -> Self {
        UncertaintyTriple {
            expected_entropy,
            entropy_of_expected,
            knowledge_uncertainty: entropy_of_expected - expected_entropy,
        }
    }
}

pub fn ensemble_uncertainty(out: &EnsembleOutput, eps: Epsilon) -> Result<UncertaintyTriple> {
    if out.member_probs.is_empty() {
        return Err(Error::invalid("ensemble output has no members"));
    }
    let first = &out.member_probs[0];
    if out.member_probs.iter().all(|p| p == first) {
        // Unanimous members: rounding in the averages must not leak into
        // knowledge uncertainty, which is exactly zero here.
        let h = entropy(first, eps);
        return Ok(UncertaintyTriple::from_parts(h, h));
    }
    let m = out.member_probs.len() as f64;
    let expected = out.member_probs.iter().map(|p| entropy(p, eps)).sum::<f64>() / m;
    Ok(UncertaintyTriple::from_parts(expected, entropy(&out.mean_probs, eps)))
}

/// Expected class probabilities α_k / α₀.
pub fn dirichlet_probabilities(d: &DirichletParams) -> ProbabilityVector {
    let a = d.alphas();
    let a0 = d.alpha0();
    let benign = a[0] / a0;
    ProbabilityVector::from_raw([benign, 1.0 - benign])
}

pub fn dirichlet_uncertainty(d: &DirichletParams, eps: Epsilon) -> UncertaintyTriple {
    let a = d.alphas();
    let a0 = d.alpha0();
    let psi0 = digamma_unchecked(a0 + 1.0);
    let expected: f64 = -a
        .iter()
        .map(|&ak| (ak / a0) * (digamma_unchecked(ak + 1.0) - psi0))
        .sum::<f64>();
    let total = entropy(&dirichlet_probabilities(d), eps);
    UncertaintyTriple::from_parts(expected.max(0.0), total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn p(a: f64) -> ProbabilityVector {
        ProbabilityVector::new(a, 1.0 - a).unwrap()
    }

    #[test]
    fn identical_uniform_members() {
        let out = EnsembleOutput::from_members(vec![p(0.5); 3]).unwrap();
        let u = ensemble_uncertainty(&out, Epsilon::default()).unwrap();
        assert!((u.expected_entropy - LN_2).abs() < 1e-9);
        assert!((u.entropy_of_expected - LN_2).abs() < 1e-9);
        assert_eq!(u.knowledge_uncertainty, 0.0);
    }

    #[test]
    fn opposite_confident_members() {
        let out = EnsembleOutput::from_members(vec![p(1.0), p(0.0)]).unwrap();
        let u = ensemble_uncertainty(&out, Epsilon::default()).unwrap();
        assert_eq!(u.expected_entropy, 0.0);
        assert!((u.entropy_of_expected - LN_2).abs() < 1e-9);
        assert!((u.knowledge_uncertainty - LN_2).abs() < 1e-9);
    }

    #[test]
    fn single_member_has_zero_knowledge_uncertainty() {
        let out = EnsembleOutput::from_members(vec![p(0.37)]).unwrap();
        let u = ensemble_uncertainty(&out, Epsilon::default()).unwrap();
        assert_eq!(u.knowledge_uncertainty, 0.0);
    }

    #[test]
    fn dirichlet_probability_examples() {
        let d = |a, b| DirichletParams::new([a, b]).unwrap();
        assert_eq!(dirichlet_probabilities(&d(1.0, 1.0)).as_array(), [0.5, 0.5]);
        assert_eq!(dirichlet_probabilities(&d(3.0, 1.0)).as_array(), [0.75, 0.25]);
        assert_eq!(dirichlet_probabilities(&d(100.0, 100.0)).as_array(), [0.5, 0.5]);
    }

    #[test]
    fn flat_dirichlet_triple() {
        let u = dirichlet_uncertainty(&DirichletParams::new([1.0, 1.0]).unwrap(), Epsilon::default());
        assert!((u.expected_entropy - 0.5).abs() < 1e-9);
        assert!((u.entropy_of_expected - LN_2).abs() < 1e-9);
        assert!((u.knowledge_uncertainty - (LN_2 - 0.5)).abs() < 1e-9);
    }
}
