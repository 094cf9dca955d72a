use crate::error::{Error, Result};
use crate::numerics::ProbabilityVector;

/// Weighted average `w·p_a + (1 − w)·p_b` of two calibrated distributions.
pub fn fuse(p_a: &ProbabilityVector, p_b: &ProbabilityVector, w: f64) -> Result<ProbabilityVector> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("fusion weight must be in [0,1], got {w}")));
    }
    let mix = |a: f64, b: f64| w * a + (1.0 - w) * b;
    Ok(ProbabilityVector::from_raw([
        mix(p_a.benign(), p_b.benign()),
        mix(p_a.malware(), p_b.malware()),
    ]))
}

/// Maps a malware score in [0,1] to `[1 − s, s]`.
pub fn score_to_probability_pair(s: f64) -> Result<ProbabilityVector> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("score must be in [0,1], got {s}")));
    }
    Ok(ProbabilityVector::from_raw([1.0 - s, s]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(a: f64, b: f64) -> ProbabilityVector {
        ProbabilityVector::new(a, b).unwrap()
    }

    #[test]
    fn fusion_examples() {
        let f = fuse(&p(0.8, 0.2), &p(0.6, 0.4), 0.5).unwrap();
        assert!((f.benign() - 0.7).abs() < 1e-12 && (f.malware() - 0.3).abs() < 1e-12);
        assert_eq!(fuse(&p(0.8, 0.2), &p(0.6, 0.4), 1.0).unwrap(), p(0.8, 0.2));
        let f = fuse(&p(1.0, 0.0), &p(0.0, 1.0), 0.8).unwrap();
        assert!((f.benign() - 0.8).abs() < 1e-12 && (f.malware() - 0.2).abs() < 1e-12);
        assert!(fuse(&p(1.0, 0.0), &p(0.0, 1.0), 1.2).is_err());
        assert!(fuse(&p(1.0, 0.0), &p(0.0, 1.0), -0.1).is_err());
    }

    #[test]
    fn score_pairs() {
        let s = score_to_probability_pair(0.7).unwrap();
        assert!((s.benign() - 0.3).abs() < 1e-15 && s.malware() == 0.7);
        assert_eq!(score_to_probability_pair(0.0).unwrap().as_array(), [1.0, 0.0]);
        assert_eq!(score_to_probability_pair(0.5).unwrap().as_array(), [0.5, 0.5]);
        assert!(score_to_probability_pair(1.01).is_err());
        assert!(score_to_probability_pair(f64::NAN).is_err());
    }
}
