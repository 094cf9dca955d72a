//! Carlini & Wagner style L2 attack used to manufacture out-of-distribution
//! inputs near the decision boundary.
//!
//! For an input `x` predicted as class `p`, the target `t` is the other
//! class and gradient descent on δ minimizes
//!
//! ```text
//! ‖δ‖₂ + c · max(z_p(x+δ) − z_t(x+δ), −κ)
//! ```

use serde::{Deserialize, Serialize};

use super::Differentiable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CwConfig {
    pub c: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Margin confidence κ.
    pub kappa: f64,
}

impl Default for CwConfig {
    fn default() -> Self {
        CwConfig {
            c: 1.0,
            steps: 100,
            step_size: 0.05,
            kappa: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwOutcome {
    pub adversarial: Vec<f64>,
    pub success: bool,
    pub perturbation_norm: f64,
    pub original_class: u8,
    pub target_class: u8,
}

fn argmax(z: [f64; 2]) -> u8 {
    u8::from(z[1] > z[0])
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Attack objective at `x + delta` and its gradient w.r.t. `delta`. At
/// δ = 0 the norm term contributes the zero subgradient.
pub fn cw_objective<M: Differentiable>(
    model: &M,
    x: &[f64],
    delta: &[f64],
    original: u8,
    cfg: &CwConfig,
) -> (f64, Vec<f64>) {
    let (p, t) = (original as usize, 1 - original as usize);
    let xd: Vec<f64> = x.iter().zip(delta).map(|(a, b)| a + b).collect();
    let z = model.logits(&xd);
    let margin = z[p] - z[t];
    let dn = norm(delta);
    let mut grad: Vec<f64> = if dn > 0.0 {
        delta.iter().map(|v| v / dn).collect()
    } else {
        vec![0.0; delta.len()]
    };
    let value;
    if margin > -cfg.kappa {
        value = dn + cfg.c * margin;
        let mut dz = [0.0; 2];
        dz[p] = cfg.c;
        dz[t] = -cfg.c;
        for (g, v) in grad.iter_mut().zip(model.logit_vjp(&xd, dz)) {
            *g += v;
        }
    } else {
        value = dn - cfg.c * cfg.kappa;
    }
    (value, grad)
}

/// Runs the attack. Returns the smallest successful perturbation seen, or
/// the lowest-objective iterate with `success = false` if the predicted
/// class never flipped.
pub fn cw_attack<M: Differentiable>(model: &M, x: &[f64], cfg: &CwConfig) -> Result<CwOutcome> {
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: x.len(),
        });
    }
    if !(cfg.c > 0.0 && cfg.step_size > 0.0 && cfg.kappa >= 0.0) {
        return Err(Error::invalid("C&W needs c > 0, step_size > 0, kappa >= 0"));
    }
    let original = argmax(model.logits(x));
    let mut delta = vec![0.0; x.len()];
    let mut best_success: Option<(f64, Vec<f64>)> = None;
    let (mut best_value, _) = cw_objective(model, x, &delta, original, cfg);
    let mut best_any = delta.clone();
    for _ in 0..cfg.steps {
        let (_, grad) = cw_objective(model, x, &delta, original, cfg);
        for (d, g) in delta.iter_mut().zip(&grad) {
            *d -= cfg.step_size * g;
        }
        let xd: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let dn = norm(&delta);
        if argmax(model.logits(&xd)) != original && best_success.as_ref().is_none_or(|(n, _)| dn < *n) {
            best_success = Some((dn, delta.clone()));
        }
        let (value, _) = cw_objective(model, x, &delta, original, cfg);
        if value < best_value {
            best_value = value;
            best_any.clone_from(&delta);
        }
    }
    let (success, delta) = match best_success {
        Some((_, d)) => (true, d),
        None => (false, best_any),
    };
    Ok(CwOutcome {
        adversarial: x.iter().zip(&delta).map(|(a, b)| a + b).collect(),
        success,
        perturbation_norm: norm(&delta),
        original_class: original,
        target_class: 1 - original,
    })
}

/// Affine two-logit model `z = W x + b`, handy as an attack target with
/// known geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: [Vec<f64>; 2],
    pub bias: [f64; 2],
}

impl LinearModel {
    pub fn new(weights: [Vec<f64>; 2], bias: [f64; 2]) -> Result<Self> {
        if weights[0].len() != weights[1].len() || weights[0].is_empty() {
            return Err(Error::invalid("linear model rows must be nonempty and equal length"));
        }
        Ok(LinearModel { weights, bias })
    }
}

impl Differentiable for LinearModel {
    fn input_dim(&self) -> usize {
        self.weights[0].len()
    }

    fn logits(&self, x: &[f64]) -> [f64; 2] {
        let dot = |w: &[f64]| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        [
            dot(&self.weights[0]) + self.bias[0],
            dot(&self.weights[1]) + self.bias[1],
        ]
    }

    fn logit_vjp(&self, _x: &[f64], dz: [f64; 2]) -> Vec<f64> {
        self.weights[0]
            .iter()
            .zip(&self.weights[1])
            .map(|(a, b)| dz[0] * a + dz[1] * b)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> LinearModel {
        LinearModel::new([vec![-1.0, 0.0], vec![1.0, 0.0]], [0.0, 0.0]).unwrap()
    }

    #[test]
    fn zero_steps_returns_input() {
        let m = toy();
        let out = cw_attack(
            &m,
            &[2.0, 1.0],
            &CwConfig {
                steps: 0,
                ..CwConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.adversarial, vec![2.0, 1.0]);
        assert!(!out.success);
        assert_eq!(out.perturbation_norm, 0.0);
    }

    #[test]
    fn successful_attack_flips_prediction() {
        let m = toy();
        let x = [1.5, -0.3];
        let out = cw_attack(
            &m,
            &x,
            &CwConfig {
                c: 2.0,
                steps: 200,
                step_size: 0.05,
                kappa: 0.0,
            },
        )
        .unwrap();
        assert!(out.success);
        assert!(out.perturbation_norm > 0.0);
        assert_ne!(argmax(m.logits(&out.adversarial)), argmax(m.logits(&x)));
        // Boundary is x0 = 0, so the minimal perturbation is 1.5.
        assert!(out.perturbation_norm < 1.5 + 0.2);
    }

    #[test]
    fn rejects_wrong_dimension_and_bad_config() {
        let m = toy();
        assert!(cw_attack(&m, &[1.0], &CwConfig::default()).is_err());
        assert!(cw_attack(
            &m,
            &[1.0, 0.0],
            &CwConfig {
                c: 0.0,
                ..CwConfig::default()
            }
        )
        .is_err());
    }
}
