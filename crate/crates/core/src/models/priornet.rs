//! Prior network: a single MLP whose output parameterizes a Dirichlet over
//! the two class probabilities.
//!
//! Concentrations come from `softplus(z) + 1e-6`. Training minimizes
//!
//! ```text
//! L = mean_in KL(Dir(α(x)) ‖ Dir(target_y)) + λ · mean_ood KL(Dir(α(x)) ‖ Dir(α_out, α_out))
//! ```
//!
//! where `target_y` puts `alpha_in_target` on the true class and
//! `alpha_out_target` on the other one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::check_training_inputs;
use super::network::{self, Layout, TrainSettings};
use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::numerics::{digamma_unchecked, ln_gamma_unchecked, sigmoid, softplus, trigamma_unchecked};

/// Floor added after softplus so concentrations are never zero.
pub const ALPHA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct DirichletParams {
    alphas: [f64; 2],
}

impl DirichletParams {
    pub fn new(alphas: [f64; 2]) -> Result<Self> {
        if alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::domain(format!(
                "Dirichlet concentrations must be finite and > 0, got {alphas:?}"
            )));
        }
        Ok(DirichletParams { alphas })
    }

    pub fn alphas(&self) -> [f64; 2] {
        self.alphas
    }

    pub fn alpha0(&self) -> f64 {
        self.alphas[0] + self.alphas[1]
    }
}

impl TryFrom<[f64; 2]> for DirichletParams {
    type Error = Error;

    fn try_from(a: [f64; 2]) -> Result<Self> {
        DirichletParams::new(a)
    }
}

impl From<DirichletParams> for [f64; 2] {
    fn from(d: DirichletParams) -> [f64; 2] {
        d.alphas
    }
}

/// KL(Dir(pred) ‖ Dir(target)) in closed form:
///
/// ```text
/// lnΓ(α₀) − Σ lnΓ(α_k) − lnΓ(β₀) + Σ lnΓ(β_k) + Σ (α_k − β_k)(ψ(α_k) − ψ(α₀))
/// ```
pub fn dirichlet_reverse_kl(pred: &DirichletParams, target: &DirichletParams) -> f64 {
    kl_and_grad(pred.alphas, target.alphas).0
}

/// Divergence and its gradient w.r.t. the predicted concentrations:
/// ∂KL/∂α_k = (α_k − β_k)ψ′(α_k) − (α₀ − β₀)ψ′(α₀).
fn kl_and_grad(a: [f64; 2], b: [f64; 2]) -> (f64, [f64; 2]) {
    let a0 = a[0] + a[1];
    let b0 = b[0] + b[1];
    let psi0 = digamma_unchecked(a0);
    let mut kl = ln_gamma_unchecked(a0) - ln_gamma_unchecked(b0);
    for k in 0..2 {
        kl += ln_gamma_unchecked(b[k]) - ln_gamma_unchecked(a[k]);
        kl += (a[k] - b[k]) * (digamma_unchecked(a[k]) - psi0);
    }
    let tri0 = trigamma_unchecked(a0);
    let grad = [
        (a[0] - b[0]) * trigamma_unchecked(a[0]) - (a0 - b0) * tri0,
        (a[1] - b[1]) * trigamma_unchecked(a[1]) - (a0 - b0) * tri0,
    ];
    (kl, grad)
}

fn alphas_from_logits(z: [f64; 2]) -> [f64; 2] {
    [softplus(z[0]) + ALPHA_FLOOR, softplus(z[1]) + ALPHA_FLOOR]
}

/// KL to `target` and its gradient w.r.t. the logits.
fn logit_loss(z: [f64; 2], target: [f64; 2]) -> (f64, [f64; 2]) {
    let (kl, g) = kl_and_grad(alphas_from_logits(z), target);
    (kl, [g[0] * sigmoid(z[0]), g[1] * sigmoid(z[1])])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorNetConfig {
    pub layer_sizes: Vec<usize>,
    pub alpha_in_target: f64,
    pub alpha_out_target: f64,
    pub lambda_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub dropout_rate: f64,
    pub use_skip_connections: bool,
    pub batch_size: Option<usize>,
}

impl Default for PriorNetConfig {
    fn default() -> Self {
        PriorNetConfig {
            layer_sizes: vec![64, 64, 32],
            alpha_in_target: 100.0,
            alpha_out_target: 1.0,
            lambda_weight: 1.0,
            learning_rate: 0.003,
            epochs: 200,
            seed: 0,
            dropout_rate: 0.0,
            use_skip_connections: true,
            batch_size: None,
        }
    }
}

impl PriorNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_out_target > 0.0 && self.alpha_in_target > self.alpha_out_target) {
            return Err(Error::invalid(format!(
                "need alpha_in_target > alpha_out_target > 0, got {} and {}",
                self.alpha_in_target, self.alpha_out_target
            )));
        }
        if !(self.lambda_weight >= 0.0 && self.lambda_weight.is_finite()) {
            return Err(Error::invalid("lambda_weight must be finite and >= 0"));
        }
        if self.layer_sizes.is_empty() || self.layer_sizes.contains(&0) {
            return Err(Error::invalid("need at least one hidden layer, all widths positive"));
        }
        if !(self.learning_rate > 0.0) || self.epochs == 0 {
            return Err(Error::invalid("learning_rate and epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must be in [0,1)"));
        }
        Ok(())
    }

    fn in_target(&self, label: u8) -> [f64; 2] {
        let mut t = [self.alpha_out_target; 2];
        t[label as usize] = self.alpha_in_target;
        t
    }

    fn out_target(&self) -> [f64; 2] {
        [self.alpha_out_target; 2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorNetModel {
    pub config: PriorNetConfig,
    layout: Layout,
    params: Vec<f64>,
    pub loss_history: Vec<f64>,
}

/// Loss split into its in-domain and weighted out-of-distribution parts,
/// with parameter gradients for each.
#[derive(Debug, Clone)]
pub struct PriorNetLoss {
    pub in_domain: f64,
    pub in_domain_grad: Vec<f64>,
    /// Already multiplied by λ.
    pub ood: f64,
    pub ood_grad: Vec<f64>,
}

impl PriorNetLoss {
    pub fn total(&self) -> f64 {
        self.in_domain + self.ood
    }

    pub fn total_grad(&self) -> Vec<f64> {
        self.in_domain_grad
            .iter()
            .zip(&self.ood_grad)
            .map(|(a, b)| a + b)
            .collect()
    }
}

pub fn train_priornet(
    x_in: &FeatureMatrix,
    labels: &[u8],
    x_ood: &FeatureMatrix,
    config: &PriorNetConfig,
) -> Result<PriorNetModel> {
    config.validate()?;
    check_training_inputs(x_in, labels)?;
    let use_ood = config.lambda_weight > 0.0;
    if use_ood {
        if x_ood.rows() == 0 {
            return Err(Error::invalid("OOD data is required when lambda_weight > 0"));
        }
        if x_ood.cols() != x_in.cols() {
            return Err(Error::DimensionMismatch {
                expected: x_in.cols(),
                got: x_ood.cols(),
            });
        }
        if !x_ood.all_finite() {
            return Err(Error::invalid("OOD features contain non-finite values"));
        }
    }
    let layout = Layout::new(x_in.cols(), &config.layer_sizes, config.use_skip_connections)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = layout.init_params(&mut rng);

    let n_in = x_in.rows();
    let mut rows: Vec<&[f64]> = x_in.iter_rows().collect();
    let mut weights = vec![1.0 / n_in as f64; n_in];
    if use_ood {
        let n_out = x_ood.rows();
        rows.extend(x_ood.iter_rows());
        weights.extend(std::iter::repeat_n(config.lambda_weight / n_out as f64, n_out));
    }
    let settings = TrainSettings {
        learning_rate: config.learning_rate,
        epochs: config.epochs,
        dropout_rate: config.dropout_rate,
        batch_size: config.batch_size,
    };
    let out_target = config.out_target();
    let history = network::train(&layout, &mut params, &rows, &weights, settings, &mut rng, |i, z| {
        let target = if i < n_in {
            config.in_target(labels[i])
        } else {
            out_target
        };
        logit_loss(z, target)
    });
    Ok(PriorNetModel {
        config: config.clone(),
        layout,
        params,
        loss_history: history,
    })
}

impl PriorNetModel {
    pub(crate) fn check_consistency(&self) -> Result<()> {
        let expected = Layout::new(
            self.layout.input_dim(),
            &self.config.layer_sizes,
            self.config.use_skip_connections,
        )?;
        if expected != self.layout || self.params.len() != expected.param_count() {
            return Err(Error::invalid(
                "stored weights do not match the configured architecture",
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layout.input_dim()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.layout.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.layout.param_count(),
                got: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    /// Pre-activation head outputs.
    pub fn logits(&self, x: &[f64]) -> Result<[f64; 2]> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(network::forward::<ChaCha8Rng>(&self.layout, &self.params, x, None).logits)
    }

    pub fn loss(&self, x_in: &FeatureMatrix, labels: &[u8], x_ood: &FeatureMatrix) -> Result<PriorNetLoss> {
        check_training_inputs(x_in, labels)?;
        let mut in_grad = vec![0.0; self.params.len()];
        let mut ood_grad = vec![0.0; self.params.len()];
        let mut in_loss = 0.0;
        let mut ood_loss = 0.0;
        let n_in = x_in.rows() as f64;
        for (row, &y) in x_in.iter_rows().zip(labels) {
            let trace = network::forward::<ChaCha8Rng>(&self.layout, &self.params, row, None);
            let (l, dz) = logit_loss(trace.logits, self.config.in_target(y));
            in_loss += l / n_in;
            network::backward(
                &self.layout,
                &self.params,
                &trace,
                [dz[0] / n_in, dz[1] / n_in],
                Some(&mut in_grad),
            );
        }
        let lambda = self.config.lambda_weight;
        if x_ood.rows() > 0 && lambda > 0.0 {
            let w = lambda / x_ood.rows() as f64;
            for row in x_ood.iter_rows() {
                let trace = network::forward::<ChaCha8Rng>(&self.layout, &self.params, row, None);
                let (l, dz) = logit_loss(trace.logits, self.config.out_target());
                ood_loss += w * l;
                network::backward(
                    &self.layout,
                    &self.params,
                    &trace,
                    [w * dz[0], w * dz[1]],
                    Some(&mut ood_grad),
                );
            }
        }
        Ok(PriorNetLoss {
            in_domain: in_loss,
            in_domain_grad: in_grad,
            ood: ood_loss,
            ood_grad,
        })
    }
}

/// Concentration parameters predicted for `x`.
pub fn priornet_alphas(model: &PriorNetModel, x: &[f64]) -> Result<DirichletParams> {
    DirichletParams::new(alphas_from_logits(model.logits(x)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn d(a: f64, b: f64) -> DirichletParams {
        DirichletParams::new([a, b]).unwrap()
    }

    #[test]
    fn self_divergence_is_zero() {
        for (a, b) in [(1.0, 1.0), (2.5, 0.3), (100.0, 1.0)] {
            assert!(dirichlet_reverse_kl(&d(a, b), &d(a, b)).abs() < 1e-10);
        }
    }

    #[test]
    fn beta_two_one_against_uniform() {
        // Closed form for Beta(2,1) vs Beta(1,1): ln 2 − 1/2.
        let kl = dirichlet_reverse_kl(&d(2.0, 1.0), &d(1.0, 1.0));
        assert!((kl - (2f64.ln() - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn invalid_concentrations_rejected() {
        assert!(DirichletParams::new([0.0, 1.0]).is_err());
        assert!(DirichletParams::new([1.0, f64::NAN]).is_err());
        assert!(DirichletParams::new([-1.0, 1.0]).is_err());
    }

    #[test]
    fn config_requires_ordered_targets() {
        let bad = PriorNetConfig {
            alpha_in_target: 1.0,
            alpha_out_target: 1.0,
            ..PriorNetConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(PriorNetConfig::default().validate().is_ok());
    }

    #[test]
    fn lambda_zero_trains_without_ood() {
        let data = generate_synthetic(60, 2, 4.0, 3).unwrap();
        let cfg = PriorNetConfig {
            layer_sizes: vec![8],
            lambda_weight: 0.0,
            epochs: 30,
            ..PriorNetConfig::default()
        };
        let empty = FeatureMatrix::new(0, 2, vec![]).unwrap();
        let m = train_priornet(&data.features, &data.labels, &empty, &cfg).unwrap();
        let loss = m.loss(&data.features, &data.labels, &empty).unwrap();
        assert_eq!(loss.ood, 0.0);
        assert_eq!(loss.total(), loss.in_domain);

        let needs_ood = PriorNetConfig {
            lambda_weight: 1.0,
            ..cfg
        };
        assert!(train_priornet(&data.features, &data.labels, &empty, &needs_ood).is_err());
    }

    #[test]
    fn alphas_are_positive_and_consistent() {
        let data = generate_synthetic(40, 2, 4.0, 3).unwrap();
        let cfg = PriorNetConfig {
            layer_sizes: vec![8],
            lambda_weight: 0.0,
            epochs: 5,
            ..PriorNetConfig::default()
        };
        let empty = FeatureMatrix::new(0, 2, vec![]).unwrap();
        let m = train_priornet(&data.features, &data.labels, &empty, &cfg).unwrap();
        for probe in [[0.0, 0.0], [1e3, -1e3], [-50.0, 20.0]] {
            let a = priornet_alphas(&m, &probe).unwrap();
            assert!(a.alphas()[0] > 0.0 && a.alphas()[1] > 0.0);
            assert!((a.alpha0() - a.alphas()[0] - a.alphas()[1]).abs() < 1e-12);
        }
        assert!(priornet_alphas(&m, &[1.0]).is_err());
    }
}
