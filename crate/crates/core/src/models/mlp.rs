use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{self, Layout, TrainSettings};
use super::Differentiable;
use crate::data::FeatureMatrix;
use crate::error::{check_len, Error, Result};
use crate::numerics::{softmax2, ProbabilityVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    /// Hidden layer widths; the two-logit output layer is implicit.
    pub layer_sizes: Vec<usize>,
    pub dropout_rate: f64,
    pub use_skip_connections: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Mini-batch size; `None` trains full-batch.
    pub batch_size: Option<usize>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            layer_sizes: vec![64, 64, 32],
            dropout_rate: 0.2,
            use_skip_connections: true,
            learning_rate: 0.01,
            epochs: 200,
            seed: 0,
            batch_size: None,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.is_empty() || self.layer_sizes.contains(&0) {
            return Err(Error::invalid("need at least one hidden layer, all widths positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }

    pub(crate) fn settings(&self) -> TrainSettings {
        TrainSettings {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            dropout_rate: self.dropout_rate,
            batch_size: self.batch_size,
        }
    }
}

/// Softmax classifier over two classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub config: MlpConfig,
    layout: Layout,
    params: Vec<f64>,
    /// Mean training loss per epoch (with dropout active).
    pub loss_history: Vec<f64>,
}

pub(crate) fn check_training_inputs(x: &FeatureMatrix, labels: &[u8]) -> Result<()> {
    check_len(x.rows(), labels.len())?;
    if x.rows() == 0 {
        return Err(Error::invalid("training split is empty"));
    }
    if !x.all_finite() {
        return Err(Error::invalid("training features contain non-finite values"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    Ok(())
}

fn cross_entropy(logits: [f64; 2], label: u8) -> (f64, [f64; 2]) {
    let p = softmax2(logits);
    let y = label as usize;
    let loss = -(p[y].max(f64::MIN_POSITIVE)).ln();
    let mut dz = p;
    dz[y] -= 1.0;
    (loss, dz)
}

/// Trains a softmax MLP with Adam on mean cross-entropy. Deterministic for
/// a given config seed.
pub fn train_mlp(x: &FeatureMatrix, labels: &[u8], config: &MlpConfig) -> Result<MlpModel> {
    config.validate()?;
    check_training_inputs(x, labels)?;
    let layout = Layout::new(x.cols(), &config.layer_sizes, config.use_skip_connections)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = layout.init_params(&mut rng);
    let rows: Vec<&[f64]> = x.iter_rows().collect();
    let weights = vec![1.0 / rows.len() as f64; rows.len()];
    let history = network::train(
        &layout,
        &mut params,
        &rows,
        &weights,
        config.settings(),
        &mut rng,
        |i, z| cross_entropy(z, labels[i]),
    );
    Ok(MlpModel {
        config: config.clone(),
        layout,
        params,
        loss_history: history,
    })
}

impl MlpModel {
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

    /// Replaces the weights; the length must match the architecture.
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

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Result<[f64; 2]> {
        self.check_dim(x)?;
        Ok(network::forward::<ChaCha8Rng>(&self.layout, &self.params, x, None).logits)
    }

    /// Pre-softmax logits and the softmax distribution.
    pub fn predict_proba(&self, x: &[f64]) -> Result<([f64; 2], ProbabilityVector)> {
        let z = self.logits(x)?;
        Ok((z, ProbabilityVector::from_raw(softmax2(z))))
    }

    /// Mean cross-entropy and its gradient w.r.t. the flat parameters,
    /// evaluated without dropout.
    pub fn loss_and_gradient(&self, x: &FeatureMatrix, labels: &[u8]) -> Result<(f64, Vec<f64>)> {
        check_training_inputs(x, labels)?;
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let n = x.rows() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (row, &y) in x.iter_rows().zip(labels) {
            let trace = network::forward::<ChaCha8Rng>(&self.layout, &self.params, row, None);
            let (l, dz) = cross_entropy(trace.logits, y);
            loss += l / n;
            network::backward(
                &self.layout,
                &self.params,
                &trace,
                [dz[0] / n, dz[1] / n],
                Some(&mut grad),
            );
        }
        Ok((loss, grad))
    }

    pub fn loss(&self, x: &FeatureMatrix, labels: &[u8]) -> Result<f64> {
        self.loss_and_gradient(x, labels).map(|(l, _)| l)
    }

    pub fn accuracy(&self, x: &FeatureMatrix, labels: &[u8]) -> Result<f64> {
        check_len(x.rows(), labels.len())?;
        let mut correct = 0usize;
        for (row, &y) in x.iter_rows().zip(labels) {
            if self.predict_proba(row)?.1.argmax() == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len().max(1) as f64)
    }
}

impl Differentiable for MlpModel {
    fn input_dim(&self) -> usize {
        self.layout.input_dim()
    }

    fn logits(&self, x: &[f64]) -> [f64; 2] {
        network::forward::<ChaCha8Rng>(&self.layout, &self.params, x, None).logits
    }

    fn logit_vjp(&self, x: &[f64], dz: [f64; 2]) -> Vec<f64> {
        let trace = network::forward::<ChaCha8Rng>(&self.layout, &self.params, x, None);
        network::backward(&self.layout, &self.params, &trace, dz, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn small_config(seed: u64) -> MlpConfig {
        MlpConfig {
            layer_sizes: vec![8, 8],
            epochs: 60,
            seed,
            ..MlpConfig::default()
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let pool = generate_synthetic(400, 2, 8.0, 7).unwrap();
        let first: Vec<usize> = (0..200).collect();
        let rest: Vec<usize> = (200..400).collect();
        let x = pool.features.select_rows(&first);
        let m = train_mlp(&x, &pool.labels[..200], &small_config(7)).unwrap();
        assert!(m.accuracy(&x, &pool.labels[..200]).unwrap() >= 0.99);
        // Held-out rows from the same draw act as oracle labels.
        let held = pool.features.select_rows(&rest);
        assert!(m.accuracy(&held, &pool.labels[200..]).unwrap() >= 0.99);
    }

    #[test]
    fn one_step_on_one_point_lowers_the_loss() {
        let x = FeatureMatrix::from_rows(&[vec![0.4, -1.2, 0.7]]).unwrap();
        let y = [1u8];
        let cfg = MlpConfig {
            epochs: 1,
            dropout_rate: 0.0,
            learning_rate: 1e-3,
            seed: 11,
            ..MlpConfig::default()
        };
        let trained = train_mlp(&x, &y, &cfg).unwrap();
        let mut initial = trained.clone();
        let layout = Layout::new(3, &cfg.layer_sizes, true).unwrap();
        initial
            .set_params(layout.init_params(&mut ChaCha8Rng::seed_from_u64(11)))
            .unwrap();
        assert!(trained.loss(&x, &y).unwrap() < initial.loss(&x, &y).unwrap());
    }

    #[test]
    fn same_seed_gives_identical_weights() {
        let d = generate_synthetic(60, 3, 2.0, 1).unwrap();
        let a = train_mlp(&d.features, &d.labels, &small_config(5)).unwrap();
        let b = train_mlp(&d.features, &d.labels, &small_config(5)).unwrap();
        assert_eq!(a.params(), b.params());
        let c = train_mlp(&d.features, &d.labels, &small_config(6)).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn minibatch_mode_is_deterministic() {
        let d = generate_synthetic(60, 3, 2.0, 1).unwrap();
        let cfg = MlpConfig {
            batch_size: Some(16),
            ..small_config(3)
        };
        let a = train_mlp(&d.features, &d.labels, &cfg).unwrap();
        let b = train_mlp(&d.features, &d.labels, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn probabilities_are_normalized_and_dims_checked() {
        let d = generate_synthetic(40, 3, 2.0, 1).unwrap();
        let m = train_mlp(&d.features, &d.labels, &small_config(2)).unwrap();
        for row in d.features.iter_rows() {
            let (_, p) = m.predict_proba(row).unwrap();
            assert!((p.benign() + p.malware() - 1.0).abs() < 1e-9);
        }
        assert!(matches!(m.predict_proba(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax2([0.0, 0.0]), [0.5, 0.5]);
        let p = softmax2([3f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_training_input() {
        let empty = FeatureMatrix::new(0, 2, vec![]).unwrap();
        assert!(train_mlp(&empty, &[], &small_config(0)).is_err());
        let nan = FeatureMatrix::from_rows(&[vec![f64::NAN, 1.0]]).unwrap();
        assert!(train_mlp(&nan, &[0], &small_config(0)).is_err());
        let ok = FeatureMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let bad = MlpConfig {
            layer_sizes: vec![],
            ..small_config(0)
        };
        assert!(train_mlp(&ok, &[0], &bad).is_err());
    }
}
