//! Post-hoc calibration: isotonic regression for score models and
//! temperature scaling for logit models.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::{softmax2, ProbabilityVector};

/// Nondecreasing piecewise-linear map from scores to probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicMap {
    pub knot_scores: Vec<f64>,
    pub knot_values: Vec<f64>,
}

/// Least-squares isotonic fit of `labels` against `scores` by pool
/// adjacent violators.
///
/// Equal scores are pooled up front, so the map has one knot per distinct
/// score whose value is the fitted level of its block.
pub fn fit_isotonic(scores: &[f64], labels: &[u8]) -> Result<IsotonicMap> {
    check_len(scores.len(), labels.len())?;
    if scores.len() < 2 {
        return Err(Error::invalid("isotonic fit needs at least two points"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("isotonic scores must be finite"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // (score, weighted sum, weight) per distinct score.
    let mut points: Vec<(f64, f64, f64)> = Vec::new();
    for &i in &order {
        let y = labels[i] as f64;
        match points.last_mut() {
            Some(last) if last.0 == scores[i] => {
                last.1 += y;
                last.2 += 1.0;
            }
            _ => points.push((scores[i], y, 1.0)),
        }
    }
    let values = pava(&points.iter().map(|p| (p.1, p.2)).collect::<Vec<_>>());
    Ok(IsotonicMap {
        knot_scores: points.iter().map(|p| p.0).collect(),
        knot_values: values,
    })
}

/// Weighted PAVA over (sum, weight) pairs already sorted by score. Returns
/// the fitted level of every input point.
pub(crate) fn pava(points: &[(f64, f64)]) -> Vec<f64> {
    // Stack of blocks: (sum, weight, count).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(points.len());
    for &(sum, weight) in points {
        blocks.push((sum, weight, 1));
        while blocks.len() > 1 {
            let n = blocks.len();
            let (s1, w1, c1) = blocks[n - 2];
            let (s2, w2, c2) = blocks[n - 1];
            if s1 / w1 <= s2 / w2 {
                break;
            }
            blocks.truncate(n - 2);
            blocks.push((s1 + s2, w1 + w2, c1 + c2));
        }
    }
    let mut out = Vec::with_capacity(points.len());
    for (s, w, c) in blocks {
        out.extend(std::iter::repeat_n(s / w, c));
    }
    out
}

/// Linear interpolation between knots, clamped outside the knot range.
pub fn apply_isotonic(map: &IsotonicMap, s: f64) -> f64 {
    let k = &map.knot_scores;
    let v = &map.knot_values;
    if k.is_empty() {
        return 0.5;
    }
    if s <= k[0] {
        return v[0];
    }
    if s >= k[k.len() - 1] {
        return v[v.len() - 1];
    }
    // First knot strictly greater than s.
    let hi = k.partition_point(|&x| x <= s);
    let lo = hi - 1;
    if k[lo] == s {
        return v[lo];
    }
    let t = (s - k[lo]) / (k[hi] - k[lo]);
    v[lo] + t * (v[hi] - v[lo])
}

pub const DEFAULT_T_MIN: f64 = 0.01;
pub const DEFAULT_T_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    t: f64,
    t_min: f64,
    t_max: f64,
}

impl Temperature {
    pub fn new(t: f64, t_min: f64, t_max: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_min <= t_max && t_max.is_finite()) {
            return Err(Error::invalid(format!("bad temperature bounds ({t_min}, {t_max})")));
        }
        if !(t_min..=t_max).contains(&t) {
            return Err(Error::invalid(format!("temperature {t} outside [{t_min}, {t_max}]")));
        }
        Ok(Temperature { t, t_min, t_max })
    }

    pub fn identity() -> Self {
        Temperature {
            t: 1.0,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
        }
    }

    pub fn value(&self) -> f64 {
        self.t
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.t_min, self.t_max)
    }
}

/// Mean negative log-likelihood of softmax(z / t).
pub fn temperature_nll(logits: &[[f64; 2]], labels: &[u8], t: f64) -> f64 {
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let a = z[0] / t;
        let b = z[1] / t;
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        total += lse - if y == 0 { a } else { b };
    }
    total / logits.len() as f64
}

const GOLDEN_TOLERANCE: f64 = 1e-9;

/// Finds the NLL-minimizing temperature on `[t_min, t_max]` by
/// golden-section search. NLL is convex in 1/T, hence unimodal in T.
/// Flat objectives resolve to `t_min`.
pub fn fit_temperature(logits: &[[f64; 2]], labels: &[u8], bounds: (f64, f64)) -> Result<Temperature> {
    check_len(logits.len(), labels.len())?;
    if logits.is_empty() {
        return Err(Error::invalid("temperature fit needs at least one example"));
    }
    if logits.iter().any(|z| !(z[0].is_finite() && z[1].is_finite())) {
        return Err(Error::invalid("logits must be finite"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    let (lo, hi) = bounds;
    Temperature::new(lo, lo, hi)?;
    let f = |t: f64| temperature_nll(logits, labels, t);

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > GOLDEN_TOLERANCE {
        // `<=` keeps the lower bracket on ties, steering flat regions low.
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mut best = 0.5 * (a + b);
    let mut best_f = f(best);
    for edge in [hi, lo] {
        let fe = f(edge);
        if fe <= best_f {
            best = edge;
            best_f = fe;
        }
    }
    Temperature::new(best.clamp(lo, hi), lo, hi)
}

/// softmax(z / T).
pub fn apply_temperature(logits: [f64; 2], temp: &Temperature) -> Result<ProbabilityVector> {
    if !(logits[0].is_finite() && logits[1].is_finite()) {
        return Err(Error::invalid("logits must be finite"));
    }
    let t = temp.value();
    Ok(ProbabilityVector::from_raw(softmax2([logits[0] / t, logits[1] / t])))
}

/// A fitted calibrator with the data split it was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum CalibrationArtifact {
    Isotonic { map: IsotonicMap, split_id: String },
    Temperature { temperature: Temperature, split_id: String },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_labels_fit_exactly() {
        let m = fit_isotonic(&[0.1, 0.2, 0.3], &[0, 1, 1]).unwrap();
        assert_eq!(m.knot_values, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn violating_pair_is_pooled() {
        let m = fit_isotonic(&[0.1, 0.2], &[1, 0]).unwrap();
        assert_eq!(m.knot_values, vec![0.5, 0.5]);
    }

    #[test]
    fn isotonic_input_errors() {
        assert!(fit_isotonic(&[0.1], &[1]).is_err());
        assert!(fit_isotonic(&[0.1, 0.2], &[1]).is_err());
        assert!(fit_isotonic(&[0.1, f64::NAN], &[1, 0]).is_err());
    }

    #[test]
    fn tied_scores_share_one_knot() {
        let m = fit_isotonic(&[0.5, 0.5, 0.9, 0.1], &[1, 0, 1, 0]).unwrap();
        assert_eq!(m.knot_scores, vec![0.1, 0.5, 0.9]);
        assert_eq!(m.knot_values, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn interpolation_and_clamping() {
        let m = IsotonicMap {
            knot_scores: vec![0.0, 1.0, 2.0],
            knot_values: vec![0.2, 0.4, 0.9],
        };
        assert_eq!(apply_isotonic(&m, -5.0), 0.2);
        assert_eq!(apply_isotonic(&m, 1.0), 0.4);
        assert!((apply_isotonic(&m, 0.5) - 0.3).abs() < 1e-15);
        assert_eq!(apply_isotonic(&m, 9.0), 0.9);
    }

    #[test]
    fn temperature_application() {
        let t1 = Temperature::identity();
        let z = [1.3, -0.4];
        assert_eq!(apply_temperature(z, &t1).unwrap().as_array(), softmax2(z));
        let t2 = Temperature::new(2.0, 0.01, 10.0).unwrap();
        let p = apply_temperature([9f64.ln(), 0.0], &t2).unwrap();
        assert!((p.benign() - 0.75).abs() < 1e-12);
        assert!(apply_temperature([f64::INFINITY, 0.0], &t2).is_err());

        let mut prev = 1.0;
        for t in [1.0, 2.0, 4.0, 8.0, 10.0] {
            let p = apply_temperature([3.0, 0.0], &Temperature::new(t, 0.01, 10.0).unwrap()).unwrap();
            assert!(p.benign() < prev && p.benign() > 0.5);
            prev = p.benign();
        }
    }

    #[test]
    fn flat_objective_returns_lower_bound() {
        let logits = vec![[0.0, 0.0]; 10];
        let labels = vec![0, 1, 0, 1, 1, 0, 0, 1, 0, 1];
        let t = fit_temperature(&logits, &labels, (0.01, 10.0)).unwrap();
        assert_eq!(t.value(), 0.01);
    }

    #[test]
    fn temperature_errors() {
        assert!(fit_temperature(&[], &[], (0.01, 10.0)).is_err());
        assert!(fit_temperature(&[[0.0, 1.0]], &[1], (0.0, 10.0)).is_err());
        assert!(Temperature::new(20.0, 0.01, 10.0).is_err());
    }
}
