//! Inductive conformal evaluation with label-conditional p-values.
//!
//! Calibration scores are grouped by the calibration example's true label.
//! A test example predicted as class ŷ is compared against group ŷ:
//!
//! ```text
//! p = |{α ∈ S_ŷ : α ≥ α_z}| / |S_ŷ|
//! ```
//!
//! Every nonconformity measure is oriented so that larger means stranger.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::ProbabilityVector;
use crate::uncertainty::UncertaintyTriple;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NcmKind {
    NegPredictedProbability,
    ExpectedEntropy,
    EntropyOfExpected,
    KnowledgeUncertainty,
}

impl NcmKind {
    pub const ALL: [NcmKind; 4] = [
        NcmKind::NegPredictedProbability,
        NcmKind::ExpectedEntropy,
        NcmKind::EntropyOfExpected,
        NcmKind::KnowledgeUncertainty,
    ];

    pub const UNCERTAINTY: [NcmKind; 3] = [
        NcmKind::ExpectedEntropy,
        NcmKind::EntropyOfExpected,
        NcmKind::KnowledgeUncertainty,
    ];

    pub fn needs_uncertainty(self) -> bool {
        self != NcmKind::NegPredictedProbability
    }

    pub fn name(self) -> &'static str {
        match self {
            NcmKind::NegPredictedProbability => "probability",
            NcmKind::ExpectedEntropy => "expected_entropy",
            NcmKind::EntropyOfExpected => "entropy_of_expected",
            NcmKind::KnowledgeUncertainty => "knowledge_uncertainty",
        }
    }
}

/// Everything a nonconformity measure may look at for one example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub fused_probs: ProbabilityVector,
    pub predicted_label: u8,
    pub uncertainty: Option<UncertaintyTriple>,
}

impl PredictionBundle {
    pub fn new(fused_probs: ProbabilityVector, uncertainty: Option<UncertaintyTriple>) -> Self {
        PredictionBundle {
            fused_probs,
            predicted_label: fused_probs.argmax(),
            uncertainty,
        }
    }
}

pub fn ncm_score(kind: NcmKind, bundle: &PredictionBundle) -> Result<f64> {
    if kind == NcmKind::NegPredictedProbability {
        return Ok(-bundle.fused_probs.get(bundle.predicted_label));
    }
    let u = bundle
        .uncertainty
        .ok_or_else(|| Error::invalid(format!("NCM {} needs an uncertainty triple", kind.name())))?;
    Ok(match kind {
        NcmKind::ExpectedEntropy => u.expected_entropy,
        NcmKind::EntropyOfExpected => u.entropy_of_expected,
        NcmKind::KnowledgeUncertainty => u.knowledge_uncertainty,
        NcmKind::NegPredictedProbability => unreachable!(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMode {
    /// count / n, exactly as defined.
    #[default]
    Exact,
    /// (count + 1) / (n + 1); never zero.
    Smoothed,
}

/// Sorted per-class nonconformity scores from the calibration split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationScores {
    pub ncm: NcmKind,
    pub split_id: String,
    pub per_label: [Vec<f64>; 2],
    #[serde(default)]
    pub mode: PValueMode,
}

pub fn build_calibration(bundles: &[PredictionBundle], true_labels: &[u8], kind: NcmKind) -> Result<CalibrationScores> {
    let scores = bundles.iter().map(|b| ncm_score(kind, b)).collect::<Result<Vec<_>>>()?;
    calibration_from_scores(&scores, true_labels, kind)
}

/// Builds calibration groups from precomputed scores.
pub fn calibration_from_scores(scores: &[f64], true_labels: &[u8], kind: NcmKind) -> Result<CalibrationScores> {
    check_len(scores.len(), true_labels.len())?;
    let mut per_label: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for (&s, &y) in scores.iter().zip(true_labels) {
        if y > 1 {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        if s.is_nan() {
            return Err(Error::invalid("nonconformity score is NaN"));
        }
        per_label[y as usize].push(s);
    }
    for (class, group) in per_label.iter_mut().enumerate() {
        if group.is_empty() {
            return Err(Error::EmptyClass { class: class as u8 });
        }
        group.sort_by(f64::total_cmp);
    }
    Ok(CalibrationScores {
        ncm: kind,
        split_id: "calibration".into(),
        per_label,
        mode: PValueMode::Exact,
    })
}

impl CalibrationScores {
    pub fn with_mode(mut self, mode: PValueMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_split_id(mut self, id: impl Into<String>) -> Self {
        self.split_id = id.into();
        self
    }

    pub fn group(&self, label: u8) -> &[f64] {
        &self.per_label[label as usize]
    }
}

pub fn p_value(calib: &CalibrationScores, predicted_label: u8, alpha_z: f64) -> Result<f64> {
    if predicted_label > 1 {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    let group = calib.group(predicted_label);
    if group.is_empty() {
        return Err(Error::EmptyClass { class: predicted_label });
    }
    // Sorted ascending: everything from the first α ≥ α_z onward counts.
    let count = group.len() - group.partition_point(|&a| a < alpha_z);
    let n = group.len();
    Ok(match calib.mode {
        PValueMode::Exact => count as f64 / n as f64,
        PValueMode::Smoothed => (count + 1) as f64 / (n + 1) as f64,
    })
}

/// Accept iff p ≥ τ.
pub fn ice_decide(p_z: f64, tau: f64) -> bool {
    p_z >= tau
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(p0: f64, u: Option<(f64, f64)>) -> PredictionBundle {
        PredictionBundle::new(
            ProbabilityVector::new(p0, 1.0 - p0).unwrap(),
            u.map(|(e, t)| UncertaintyTriple::from_parts(e, t)),
        )
    }

    fn calib(scores: &[f64]) -> CalibrationScores {
        CalibrationScores {
            ncm: NcmKind::ExpectedEntropy,
            split_id: "t".into(),
            per_label: [scores.to_vec(), scores.to_vec()],
            mode: PValueMode::Exact,
        }
    }

    #[test]
    fn probability_ncm_is_negated() {
        let b = bundle(0.9, None);
        assert_eq!(b.predicted_label, 0);
        assert_eq!(ncm_score(NcmKind::NegPredictedProbability, &b).unwrap(), -0.9);
    }

    #[test]
    fn uncertainty_ncms_select_fields() {
        let b = bundle(0.6, Some((0.3, 0.5)));
        assert_eq!(ncm_score(NcmKind::ExpectedEntropy, &b).unwrap(), 0.3);
        assert_eq!(ncm_score(NcmKind::EntropyOfExpected, &b).unwrap(), 0.5);
        assert!((ncm_score(NcmKind::KnowledgeUncertainty, &b).unwrap() - 0.2).abs() < 1e-15);
        assert!(ncm_score(NcmKind::ExpectedEntropy, &bundle(0.6, None)).is_err());
    }

    #[test]
    fn confident_bundles_conform_more() {
        let confident = bundle(0.99, Some((0.05, 0.056)));
        let unsure = bundle(0.5, Some((0.4, 0.693)));
        for kind in NcmKind::ALL {
            assert!(
                ncm_score(kind, &confident).unwrap() < ncm_score(kind, &unsure).unwrap(),
                "{kind:?}"
            );
        }
    }

    #[test]
    fn calibration_groups() {
        let bundles: Vec<_> = [0.9, 0.2, 0.6, 0.7].iter().map(|&p| bundle(p, None)).collect();
        let c = build_calibration(&bundles, &[0, 0, 1, 1], NcmKind::NegPredictedProbability).unwrap();
        assert_eq!(c.group(0).len(), 2);
        assert_eq!(c.group(1).len(), 2);
        for g in &c.per_label {
            assert!(g.windows(2).all(|w| w[0] <= w[1]));
        }
        let err = build_calibration(&bundles, &[1, 1, 1, 1], NcmKind::NegPredictedProbability);
        assert!(matches!(err, Err(Error::EmptyClass { class: 0 })));
    }

    #[test]
    fn p_value_counting() {
        let c = calib(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p_value(&c, 0, 2.5).unwrap(), 0.5);
        assert_eq!(p_value(&c, 0, 1.0).unwrap(), 1.0);
        assert_eq!(p_value(&c, 0, -3.0).unwrap(), 1.0);
        assert_eq!(p_value(&c, 0, 4.5).unwrap(), 0.0);
        // Ties count toward the numerator.
        assert_eq!(p_value(&c, 0, 4.0).unwrap(), 0.25);
        let s = c.with_mode(PValueMode::Smoothed);
        assert_eq!(p_value(&s, 1, 4.5).unwrap(), 0.2);
    }

    #[test]
    fn decisions() {
        assert!(ice_decide(0.5, 0.5));
        assert!(!ice_decide(0.49, 0.5));
        assert!(ice_decide(0.0, 0.0));
    }
}
