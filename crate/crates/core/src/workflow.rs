//! Single-model training and calibration outside the experiment harness.
//!
//! These are the building blocks behind the `train` and `calibrate`
//! commands: fit one model on a labeled dataset, then fit one calibrator
//! for it on another.

use serde::{Deserialize, Serialize};

use crate::calibration::{fit_isotonic, fit_temperature, CalibrationArtifact, DEFAULT_T_MAX, DEFAULT_T_MIN};
use crate::data::{standardize, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::harness::{adversarial_ood, gaussian_ood, harness_mlp, harness_priornet, OodSource, StumpsConfig};
use crate::models::{
    priornet_alphas, train_ensemble, train_mlp, train_priornet, train_stumps, CwConfig, MlpConfig, ModelDocument,
    PriorNetConfig, SavedModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Ensemble,
    Priornet,
    Stumps,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Ensemble => "ensemble",
            ModelKind::Priornet => "priornet",
            ModelKind::Stumps => "stumps",
        }
    }
}

/// Training settings for any model kind; fields irrelevant to the chosen
/// kind are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Standardize neural inputs with statistics of the training data.
    pub standardize: bool,
    pub mlp: MlpConfig,
    pub ensemble_size: usize,
    pub priornet: PriorNetConfig,
    pub stumps: StumpsConfig,
    pub ood_source: OodSource,
    pub ood_count: usize,
    pub ood_scale: f64,
    pub cw: CwConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            standardize: true,
            mlp: harness_mlp(),
            ensemble_size: 5,
            priornet: harness_priornet(),
            stumps: StumpsConfig::default(),
            ood_source: OodSource::CwAdversarial,
            ood_count: 500,
            ood_scale: 3.0,
            cw: CwConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Trains one model on every row of `data`. Split tags, if present, are
/// ignored.
pub fn train_model(kind: ModelKind, data: &LabeledDataset, cfg: &TrainConfig) -> Result<ModelDocument> {
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    if kind == ModelKind::Stumps {
        let m = train_stumps(
            &data.features,
            &data.labels,
            cfg.stumps.rounds,
            cfg.stumps.learning_rate,
        )?;
        return Ok(ModelDocument::new(SavedModel::Stumps(m)));
    }

    let mut all = data.clone();
    all.splits = Some(vec![Split::Train; data.len()]);
    let stats = if cfg.standardize {
        let s = standardize(&all)?;
        all = s.clone();
        s.standardization
    } else {
        None
    };
    let x = &all.features;
    let y = &all.labels;
    let mlp_cfg = MlpConfig {
        seed: cfg.seed,
        ..cfg.mlp.clone()
    };
    let model = match kind {
        ModelKind::Mlp => SavedModel::Mlp(train_mlp(x, y, &mlp_cfg)?),
        ModelKind::Ensemble => SavedModel::Ensemble(train_ensemble(x, y, &cfg.mlp, cfg.ensemble_size, cfg.seed)?),
        ModelKind::Priornet => {
            let count = cfg.ood_count.max(1);
            let ood_seed = cfg.seed.wrapping_add(1);
            let ood = match cfg.ood_source {
                OodSource::Gaussian => gaussian_ood(count, x.cols(), cfg.ood_scale, ood_seed)?,
                OodSource::CwAdversarial => {
                    let victim = train_mlp(x, y, &mlp_cfg)?;
                    adversarial_ood(&victim, x, count, &cfg.cw, ood_seed)?
                }
            };
            let pn = PriorNetConfig {
                seed: cfg.seed,
                ..cfg.priornet.clone()
            };
            SavedModel::Priornet(train_priornet(x, y, &ood, &pn)?)
        }
        ModelKind::Stumps => unreachable!(),
    };
    let doc = ModelDocument::new(model);
    Ok(match stats {
        Some(s) => doc.with_standardization(s),
        None => doc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    Isotonic,
    Temperature,
}

/// Fits a calibrator for `doc` on every row of `data`.
///
/// Isotonic regression needs a scalar score and applies to stumps;
/// temperature scaling needs logits and applies to the neural models. An
/// ensemble gets one temperature fitted on the mean member logits and a
/// PriorNet's temperature acts on ln α.
pub fn calibrate_model(
    doc: &ModelDocument,
    data: &LabeledDataset,
    method: CalibrationMethod,
    split_id: &str,
) -> Result<CalibrationArtifact> {
    if data.dim() != doc.model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: doc.model.input_dim(),
            got: data.dim(),
        });
    }
    let rows = || data.features.iter_rows().map(|r| doc.prepare_input(r));
    let y = &data.labels;
    let bounds = (DEFAULT_T_MIN, DEFAULT_T_MAX);
    match (method, &doc.model) {
        (CalibrationMethod::Isotonic, SavedModel::Stumps(m)) => {
            let scores = data
                .features
                .iter_rows()
                .map(|r| m.score(r))
                .collect::<Result<Vec<_>>>()?;
            Ok(CalibrationArtifact::Isotonic {
                map: fit_isotonic(&scores, y)?,
                split_id: split_id.into(),
            })
        }
        (
            CalibrationMethod::Temperature,
            model @ (SavedModel::Mlp(_) | SavedModel::Ensemble(_) | SavedModel::Priornet(_)),
        ) => {
            let mut z = Vec::with_capacity(data.len());
            let mut labels = Vec::with_capacity(data.len());
            for (x, &label) in rows().zip(y) {
                match model {
                    SavedModel::Mlp(m) => {
                        z.push(m.logits(&x)?);
                        labels.push(label);
                    }
                    SavedModel::Ensemble(e) => {
                        z.push(e.mean_logits(&x)?);
                        labels.push(label);
                    }
                    SavedModel::Priornet(p) => {
                        let a = priornet_alphas(p, &x)?.alphas();
                        z.push([a[0].ln(), a[1].ln()]);
                        labels.push(label);
                    }
                    SavedModel::Stumps(_) => unreachable!(),
                }
            }
            Ok(CalibrationArtifact::Temperature {
                temperature: fit_temperature(&z, &labels, bounds)?,
                split_id: split_id.into(),
            })
        }
        (CalibrationMethod::Isotonic, _) => Err(Error::invalid(
            "isotonic calibration applies to score models (stumps); use temperature for neural models",
        )),
        (CalibrationMethod::Temperature, _) => Err(Error::invalid(
            "temperature scaling needs logits; use isotonic for stumps",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn quick() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.mlp.epochs = 5;
        c.mlp.layer_sizes = vec![8];
        c.priornet.epochs = 5;
        c.priornet.layer_sizes = vec![8];
        c.ensemble_size = 2;
        c.ood_count = 20;
        c.cw.steps = 10;
        c.stumps.rounds = 10;
        c
    }

    #[test]
    fn every_kind_trains_and_round_trips() {
        let data = generate_synthetic(200, 3, 3.0, 1).unwrap();
        for kind in [
            ModelKind::Mlp,
            ModelKind::Ensemble,
            ModelKind::Priornet,
            ModelKind::Stumps,
        ] {
            let doc = train_model(kind, &data, &quick()).unwrap();
            assert_eq!(doc.standardization.is_some(), kind != ModelKind::Stumps, "{kind:?}");
            let back = ModelDocument::from_json(&doc.to_json().unwrap()).unwrap();
            assert_eq!(back, doc);
        }
    }

    #[test]
    fn calibration_method_must_fit_the_model() {
        let data = generate_synthetic(200, 3, 3.0, 2).unwrap();
        let stumps = train_model(ModelKind::Stumps, &data, &quick()).unwrap();
        let mlp = train_model(ModelKind::Mlp, &data, &quick()).unwrap();
        assert!(matches!(
            calibrate_model(&stumps, &data, CalibrationMethod::Isotonic, "c").unwrap(),
            CalibrationArtifact::Isotonic { .. }
        ));
        assert!(matches!(
            calibrate_model(&mlp, &data, CalibrationMethod::Temperature, "c").unwrap(),
            CalibrationArtifact::Temperature { .. }
        ));
        assert!(calibrate_model(&stumps, &data, CalibrationMethod::Temperature, "c").is_err());
        assert!(calibrate_model(&mlp, &data, CalibrationMethod::Isotonic, "c").is_err());
    }

    #[test]
    fn calibration_checks_dimensions() {
        let data = generate_synthetic(100, 3, 3.0, 3).unwrap();
        let other = generate_synthetic(100, 4, 3.0, 3).unwrap();
        let mlp = train_model(ModelKind::Mlp, &data, &quick()).unwrap();
        assert!(matches!(
            calibrate_model(&mlp, &other, CalibrationMethod::Temperature, "c"),
            Err(Error::DimensionMismatch { expected: 3, got: 4 })
        ));
    }
}
