//! Special functions and entropy primitives.
//!
//! Everything here works in nats. The special functions cover the positive
//! real axis only, which is all the Dirichlet machinery needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that a distribution sums to one.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Guard added inside logarithms of probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Epsilon(f64);

impl Epsilon {
    pub const DEFAULT: Epsilon = Epsilon(1e-12);

    pub fn new(value: f64) -> Result<Self> {
        if !(value > 0.0 && value < 1e-6) {
            return Err(Error::invalid(format!("epsilon must lie in (0, 1e-6), got {value}")));
        }
        Ok(Epsilon(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Epsilon {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for Epsilon {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Epsilon::new(value)
    }
}

impl From<Epsilon> for f64 {
    fn from(eps: Epsilon) -> f64 {
        eps.0
    }
}

/// A distribution over {benign, malware}. Index 0 is benign, index 1 is
/// malware.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct ProbabilityVector([f64; 2]);

impl ProbabilityVector {
    pub fn new(benign: f64, malware: f64) -> Result<Self> {
        Self::with_tolerance([benign, malware], SIMPLEX_TOLERANCE)
    }

    /// Validates against a caller-chosen simplex tolerance. Used by loaders
    /// whose inputs were rounded by an external producer.
    pub fn with_tolerance(p: [f64; 2], tolerance: f64) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "probabilities must be finite and nonnegative, got {p:?}"
            )));
        }
        let sum = p[0] + p[1];
        if (sum - 1.0).abs() > tolerance {
            return Err(Error::invalid(format!(
                "probabilities must sum to 1 (within {tolerance:e}), got sum {sum}"
            )));
        }
        Ok(ProbabilityVector(p))
    }

    pub(crate) fn from_raw(p: [f64; 2]) -> Self {
        debug_assert!((p[0] + p[1] - 1.0).abs() <= 1e-6, "not a distribution: {p:?}");
        ProbabilityVector(p)
    }

    pub fn uniform() -> Self {
        ProbabilityVector([0.5, 0.5])
    }

    pub fn as_array(&self) -> [f64; 2] {
        self.0
    }

    pub fn benign(&self) -> f64 {
        self.0[0]
    }

    pub fn malware(&self) -> f64 {
        self.0[1]
    }

    pub fn get(&self, class: u8) -> f64 {
        self.0[class as usize]
    }

    /// Predicted class. Exact ties go to benign.
    pub fn argmax(&self) -> u8 {
        u8::from(self.0[1] > self.0[0])
    }

    pub fn max(&self) -> f64 {
        self.0[0].max(self.0[1])
    }
}

impl TryFrom<[f64; 2]> for ProbabilityVector {
    type Error = Error;

    fn try_from(p: [f64; 2]) -> Result<Self> {
        ProbabilityVector::with_tolerance(p, SIMPLEX_TOLERANCE)
    }
}

impl From<ProbabilityVector> for [f64; 2] {
    fn from(p: ProbabilityVector) -> [f64; 2] {
        p.0
    }
}

/// Numerically stable two-class softmax.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::domain(format!("{name} requires a finite x > 0, got {x}")));
    }
    Ok(())
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for x > 0 (Lanczos, g = 7).
pub fn log_gamma(x: f64) -> Result<f64> {
    check_positive("log_gamma", x)?;
    Ok(ln_gamma_unchecked(x))
}

pub(crate) fn ln_gamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        // lnΓ(x) = lnΓ(x + 1) − ln x keeps the series in its accurate range.
        return ln_gamma_unchecked(x + 1.0) - x.ln();
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEFFS[0];
    for (i, &c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

// B_{2k} / (2k) for k = 1..7.
const DIGAMMA_ASYMPTOTIC: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
];

// B_{2k} for k = 1..7.
const BERNOULLI_EVEN: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
];

const ASYMPTOTIC_START: f64 = 6.0;

/// Digamma ψ(x) = d/dx ln Γ(x) for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive("digamma", x)?;
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < ASYMPTOTIC_START {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let mut term = inv2;
    let mut series = 0.0;
    for c in DIGAMMA_ASYMPTOTIC {
        series += c * term;
        term *= inv2;
    }
    shift + x.ln() - 0.5 / x - series
}

/// Trigamma ψ′(x) for x > 0. Needed for gradients of Dirichlet divergences.
pub fn trigamma(x: f64) -> Result<f64> {
    check_positive("trigamma", x)?;
    Ok(trigamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < ASYMPTOTIC_START {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut term = inv2 * inv;
    let mut series = 0.0;
    for b in BERNOULLI_EVEN {
        series += b * term;
        term *= inv2;
    }
    shift + inv + 0.5 * inv2 + series
}

/// Shannon entropy −Σ p ln(p + ε), clamped at zero.
pub fn entropy(p: &ProbabilityVector, eps: Epsilon) -> f64 {
    entropy_slice(&p.0, eps)
}

pub(crate) fn entropy_slice(p: &[f64], eps: Epsilon) -> f64 {
    let h: f64 = p.iter().map(|&v| -v * (v + eps.0).ln()).sum();
    // The ε guard can push degenerate distributions a hair below zero.
    h.max(0.0)
}

/// Validates a raw slice as a distribution before taking its entropy.
pub fn entropy_checked(p: &[f64], eps: Epsilon) -> Result<f64> {
    if p.is_empty() || p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("entropy requires finite nonnegative components"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::invalid(format!("distribution sums to {sum}, not 1")));
    }
    Ok(entropy_slice(p, eps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_gamma_known_values() {
        assert!(log_gamma(1.0).unwrap().abs() < 1e-12);
        assert!(log_gamma(2.0).unwrap().abs() < 1e-12);
        let half = 0.5 * std::f64::consts::PI.ln();
        assert!((log_gamma(0.5).unwrap() - half).abs() < 1e-12);
        assert!((log_gamma(0.5).unwrap() - 0.572_364_942_9).abs() < 1e-10);
        // ln(9!) = ln 362880
        assert!((log_gamma(10.0).unwrap() - 362_880f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn special_functions_reject_bad_domain() {
        for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(log_gamma(bad), Err(Error::Domain(_))));
            assert!(matches!(digamma(bad), Err(Error::Domain(_))));
            assert!(matches!(trigamma(bad), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn digamma_recurrence_pairs() {
        assert!((digamma(2.0).unwrap() - 0.422_784_335_1).abs() < 1e-10);
        assert!((digamma(3.0).unwrap() - digamma(2.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn trigamma_at_one_is_pi_squared_over_six() {
        let expect = std::f64::consts::PI.powi(2) / 6.0;
        assert!((trigamma(1.0).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn entropy_examples() {
        let eps = Epsilon::default();
        let h = entropy(&ProbabilityVector::new(0.5, 0.5).unwrap(), eps);
        assert!((h - std::f64::consts::LN_2).abs() < 1e-9);
        let h = entropy(&ProbabilityVector::new(1.0, 0.0).unwrap(), eps);
        assert_eq!(h, 0.0);
        let h = entropy(&ProbabilityVector::new(0.9, 0.1).unwrap(), eps);
        assert!((h - 0.325_083_0).abs() < 1e-7);
    }

    #[test]
    fn malformed_distributions_are_rejected() {
        assert!(ProbabilityVector::new(0.7, 0.7).is_err());
        assert!(ProbabilityVector::new(-0.1, 1.1).is_err());
        assert!(entropy_checked(&[0.2, 0.2], Epsilon::default()).is_err());
    }

    #[test]
    fn epsilon_bounds() {
        assert!(Epsilon::new(1e-12).is_ok());
        assert!(Epsilon::new(0.0).is_err());
        assert!(Epsilon::new(1e-3).is_err());
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        let p = softmax2([3f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-15);
    }
}
