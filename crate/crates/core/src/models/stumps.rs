//! Gradient-boosted depth-one trees on logistic loss.
//!
//! Each round fits one stump to the Newton step of the logistic loss: the
//! split maximizes G_L²/(H_L+λ) + G_R²/(H_R+λ) and each leaf predicts
//! −G/(H+λ), shrunk by the learning rate. The raw additive score passes
//! through a sigmoid to land in [0, 1].

use serde::{Deserialize, Serialize};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::numerics::sigmoid;

const LEAF_L2: f64 = 1.0;
const PRIOR_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    /// Value added when `x[feature] <= threshold`.
    pub left_value: f64,
    pub right_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StumpEnsembleModel {
    pub input_dim: usize,
    /// Log-odds of the training prior.
    pub base_score: f64,
    pub stumps: Vec<Stump>,
    pub learning_rate: f64,
}

pub fn train_stumps(x: &FeatureMatrix, labels: &[u8], rounds: usize, learning_rate: f64) -> Result<StumpEnsembleModel> {
    if rounds == 0 {
        return Err(Error::invalid("boosting needs at least one round"));
    }
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::invalid("learning_rate must be positive"));
    }
    super::mlp::check_training_inputs(x, labels)?;
    let n = x.rows();
    let d = x.cols();
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let prior = (positives as f64 / n as f64).clamp(PRIOR_CLAMP, 1.0 - PRIOR_CLAMP);
    let base_score = (prior / (1.0 - prior)).ln();
    let mut model = StumpEnsembleModel {
        input_dim: d,
        base_score,
        stumps: Vec::new(),
        learning_rate,
    };
    if positives == 0 || positives == n {
        return Ok(model);
    }

    // Per-feature row order, computed once. Ties broken by row index keep
    // the scan deterministic.
    let orders: Vec<Vec<usize>> = (0..d)
        .map(|j| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x.row(a)[j].total_cmp(&x.row(b)[j]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let mut raw = vec![base_score; n];
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    for _ in 0..rounds {
        for i in 0..n {
            let p = sigmoid(raw[i]);
            g[i] = p - labels[i] as f64;
            h[i] = p * (1.0 - p);
        }
        let g_total: f64 = g.iter().sum();
        let h_total: f64 = h.iter().sum();
        let mut best: Option<(f64, usize, f64)> = None;
        for (j, order) in orders.iter().enumerate() {
            let mut gl = 0.0;
            let mut hl = 0.0;
            for k in 0..n - 1 {
                let i = order[k];
                gl += g[i];
                hl += h[i];
                let v = x.row(i)[j];
                let next = x.row(order[k + 1])[j];
                if next <= v {
                    continue;
                }
                let gr = g_total - gl;
                let hr = h_total - hl;
                let gain = gl * gl / (hl + LEAF_L2) + gr * gr / (hr + LEAF_L2);
                if best.is_none_or(|(b, _, _)| gain > b) {
                    best = Some((gain, j, 0.5 * (v + next)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            break;
        };
        let (mut gl, mut hl) = (0.0, 0.0);
        for i in 0..n {
            if x.row(i)[feature] <= threshold {
                gl += g[i];
                hl += h[i];
            }
        }
        let stump = Stump {
            feature,
            threshold,
            left_value: -learning_rate * gl / (hl + LEAF_L2),
            right_value: -learning_rate * (g_total - gl) / (h_total - hl + LEAF_L2),
        };
        for (i, r) in raw.iter_mut().enumerate() {
            *r += stump.apply(x.row(i));
        }
        model.stumps.push(stump);
    }
    Ok(model)
}

impl Stump {
    fn apply(&self, x: &[f64]) -> f64 {
        if x[self.feature] <= self.threshold {
            self.left_value
        } else {
            self.right_value
        }
    }
}

impl StumpEnsembleModel {
    pub fn raw_score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(self.base_score + self.stumps.iter().map(|s| s.apply(x)).sum::<f64>())
    }

    /// Malware score in [0, 1].
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        self.raw_score(x).map(sigmoid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn threshold_data(n: usize) -> (FeatureMatrix, Vec<u8>) {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64]).collect();
        let labels = (0..n).map(|i| u8::from(i as f64 / n as f64 > 0.37)).collect();
        (FeatureMatrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn learns_a_one_dimensional_threshold() {
        let (x, y) = threshold_data(200);
        let m = train_stumps(&x, &y, 10, 0.3).unwrap();
        let correct = x
            .iter_rows()
            .zip(&y)
            .filter(|(r, &l)| u8::from(m.score(r).unwrap() > 0.5) == l)
            .count();
        assert!(correct as f64 / 200.0 >= 0.95);
        assert!(m.stumps.iter().all(|s| (s.threshold - 0.37).abs() < 0.01));
    }

    #[test]
    fn constant_labels_give_prior_only_model() {
        let (x, _) = threshold_data(50);
        let m = train_stumps(&x, &[1; 50], 5, 0.1).unwrap();
        assert!(m.stumps.is_empty());
        for r in x.iter_rows() {
            assert!(m.score(r).unwrap() >= 0.99);
        }
    }

    #[test]
    fn zero_rounds_rejected() {
        let (x, y) = threshold_data(10);
        assert!(train_stumps(&x, &y, 0, 0.1).is_err());
    }

    #[test]
    fn scores_stay_in_unit_interval() {
        let (x, y) = threshold_data(100);
        let m = train_stumps(&x, &y, 50, 1.0).unwrap();
        for r in x.iter_rows() {
            let s = m.score(r).unwrap();
            assert!((0.0..=1.0).contains(&s));
        }
        assert!(m.score(&[0.1, 0.2]).is_err());
    }
}
