//! End-to-end experiments: generate, split, shift, train, calibrate, fuse,
//! score, pick a threshold on the calibration split and evaluate on test.
//!
//! One calibration split serves temperature/isotonic fitting, conformal
//! calibration and threshold tuning. Reports flag that reuse.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    apply_isotonic, apply_temperature, fit_isotonic, fit_temperature, CalibrationArtifact, IsotonicMap, Temperature,
    DEFAULT_T_MAX, DEFAULT_T_MIN,
};
use crate::conformal::{build_calibration, ncm_score, p_value, NcmKind, PValueMode, PredictionBundle};
use crate::data::{
    apply_shift, generate_synthetic, split, standardize, FeatureMatrix, LabeledDataset, ShiftSpec, Split,
    Standardization,
};
use crate::decision::{
    optimize_threshold, rates, sweep, tally, ConfusionQuad, GridSpec, Rates, SweepPoint, ThresholdKind,
};
use crate::error::{check_len, Error, Result};
use crate::models::{
    cw_attack, fuse, priornet_alphas, score_to_probability_pair, train_ensemble, train_mlp, train_priornet,
    train_stumps, CwConfig, DirichletParams, EnsembleModel, EnsembleOutput, MlpConfig, MlpModel, PriorNetConfig,
    PriorNetModel, StumpEnsembleModel,
};
use crate::numerics::{Epsilon, ProbabilityVector};
use crate::uncertainty::{dirichlet_uncertainty, ensemble_uncertainty, UncertaintyTriple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Threshold on the fused predicted-class probability.
    ProbThreshold,
    /// Threshold on an uncertainty measure.
    UncertaintyThreshold,
    /// Conformal p-values with the probability nonconformity measure.
    IceProbNcm,
    /// Conformal p-values with an uncertainty nonconformity measure.
    IceUncertaintyNcm,
}

impl Pipeline {
    pub const ALL: [Pipeline; 4] = [
        Pipeline::ProbThreshold,
        Pipeline::UncertaintyThreshold,
        Pipeline::IceProbNcm,
        Pipeline::IceUncertaintyNcm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::ProbThreshold => "prob_threshold",
            Pipeline::UncertaintyThreshold => "uncertainty_threshold",
            Pipeline::IceProbNcm => "ice_prob_ncm",
            Pipeline::IceUncertaintyNcm => "ice_uncertainty_ncm",
        }
    }

    fn is_conformal(self) -> bool {
        matches!(self, Pipeline::IceProbNcm | Pipeline::IceUncertaintyNcm)
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseModel {
    Stumps,
    Mlp,
    Ensemble,
    Priornet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n: usize,
    pub d: usize,
    pub class_sep: f64,
    /// Train, calibration and test fractions.
    pub fractions: [f64; 3],
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n: 3000,
            d: 8,
            class_sep: 2.5,
            fractions: [0.6, 0.1, 0.3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StumpsConfig {
    pub rounds: usize,
    pub learning_rate: f64,
}

impl Default for StumpsConfig {
    fn default() -> Self {
        StumpsConfig {
            rounds: 100,
            learning_rate: 0.3,
        }
    }
}

/// Where PriorNet's out-of-distribution training inputs come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodSource {
    /// C&W adversarial examples crafted against an MLP.
    #[default]
    CwAdversarial,
    /// Isotropic Gaussian noise with standard deviation `ood_scale`.
    Gaussian,
}

/// Network settings sized for quick desk-scale runs.
pub(crate) fn harness_mlp() -> MlpConfig {
    MlpConfig {
        layer_sizes: vec![32, 32, 16],
        dropout_rate: 0.1,
        epochs: 150,
        batch_size: Some(256),
        ..MlpConfig::default()
    }
}

pub(crate) fn harness_priornet() -> PriorNetConfig {
    PriorNetConfig {
        layer_sizes: vec![32, 32, 16],
        epochs: 150,
        batch_size: Some(256),
        ..PriorNetConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: Option<String>,
    pub pipeline: Pipeline,
    pub calibrated: bool,
    pub base_models: Vec<BaseModel>,
    /// Weight of the neural probability when fused with stumps. Defaults to
    /// 0.5 without shift and 0.8 with shift.
    pub fusion_weight: Option<f64>,
    pub shift: ShiftSpec,
    /// Master seed; every other seed is derived from it and reported.
    pub seed: u64,
    pub ncm_kind: Option<NcmKind>,
    pub dataset: DatasetSpec,
    pub mlp: MlpConfig,
    pub ensemble_size: usize,
    pub priornet: PriorNetConfig,
    pub stumps: StumpsConfig,
    pub ood_source: OodSource,
    /// Number of OOD inputs generated for PriorNet.
    pub ood_count: usize,
    /// Standard deviation of Gaussian OOD data, in standardized units.
    pub ood_scale: f64,
    pub cw: CwConfig,
    pub grid: GridSpec,
    pub p_value_mode: PValueMode,
    /// τ used when the calibration split has no errors (or no correct
    /// predictions); threshold pipelines reject this fraction instead.
    pub fallback_threshold: f64,
    pub epsilon: Epsilon,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: None,
            pipeline: Pipeline::ProbThreshold,
            calibrated: false,
            base_models: vec![BaseModel::Stumps, BaseModel::Mlp],
            fusion_weight: None,
            shift: ShiftSpec::none(),
            seed: 0,
            ncm_kind: None,
            dataset: DatasetSpec::default(),
            mlp: harness_mlp(),
            ensemble_size: 5,
            priornet: harness_priornet(),
            stumps: StumpsConfig::default(),
            ood_source: OodSource::CwAdversarial,
            ood_count: 500,
            ood_scale: 3.0,
            cw: CwConfig::default(),
            grid: GridSpec::FromScores,
            p_value_mode: PValueMode::Exact,
            fallback_threshold: 0.1,
            epsilon: Epsilon::DEFAULT,
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn has(&self, model: BaseModel) -> bool {
        self.base_models.contains(&model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_models.is_empty() {
            return Err(Error::invalid("base_models is empty"));
        }
        for (i, m) in self.base_models.iter().enumerate() {
            if self.base_models[..i].contains(m) {
                return Err(Error::invalid(format!("base model {m:?} listed twice")));
            }
        }
        if let Some(w) = self.fusion_weight {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::invalid(format!("fusion_weight must be in [0,1], got {w}")));
            }
        }
        if self.has(BaseModel::Ensemble) && self.ensemble_size == 0 {
            return Err(Error::invalid("ensemble_size must be at least 1"));
        }
        if !(self.fallback_threshold > 0.0 && self.fallback_threshold < 1.0) {
            return Err(Error::invalid("fallback_threshold must lie in (0,1)"));
        }
        if !(self.ood_scale > 0.0 && self.ood_scale.is_finite()) {
            return Err(Error::invalid("ood_scale must be positive"));
        }
        if self.has(BaseModel::Priornet) && self.priornet.lambda_weight > 0.0 && self.ood_count == 0 {
            return Err(Error::invalid("ood_count must be positive when PriorNet uses OOD data"));
        }
        let uncertainty_ncm = self.ncm_kind.is_some_and(NcmKind::needs_uncertainty);
        match self.pipeline {
            Pipeline::ProbThreshold => {
                if self.ncm_kind.is_some() {
                    return Err(Error::invalid("prob_threshold takes no ncm_kind"));
                }
            }
            Pipeline::UncertaintyThreshold => {
                if !(self.has(BaseModel::Ensemble) || self.has(BaseModel::Priornet)) {
                    return Err(Error::invalid("uncertainty_threshold needs an ensemble or priornet"));
                }
                if self.ncm_kind.is_some() && !uncertainty_ncm {
                    return Err(Error::invalid("uncertainty_threshold needs an uncertainty measure"));
                }
            }
            Pipeline::IceProbNcm => {
                if uncertainty_ncm {
                    return Err(Error::invalid("ice_prob_ncm uses the probability NCM"));
                }
            }
            Pipeline::IceUncertaintyNcm => {
                if !self.has(BaseModel::Ensemble) {
                    return Err(Error::invalid("ice_uncertainty_ncm needs an ensemble base model"));
                }
                if !uncertainty_ncm {
                    return Err(Error::invalid("ice_uncertainty_ncm needs an uncertainty ncm_kind"));
                }
            }
        }
        Ok(())
    }

    /// The score the pipeline thresholds: an NCM for conformal pipelines,
    /// the uncertainty measure for `uncertainty_threshold`.
    pub fn effective_ncm(&self) -> Option<NcmKind> {
        match self.pipeline {
            Pipeline::ProbThreshold => None,
            Pipeline::UncertaintyThreshold => Some(self.ncm_kind.unwrap_or(NcmKind::EntropyOfExpected)),
            Pipeline::IceProbNcm => Some(NcmKind::NegPredictedProbability),
            Pipeline::IceUncertaintyNcm => self.ncm_kind,
        }
    }

    pub fn effective_fusion_weight(&self) -> f64 {
        self.fusion_weight
            .unwrap_or(if self.shift.is_identity() { 0.5 } else { 0.8 })
    }

    pub fn display_name(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        let ncm = self
            .effective_ncm()
            .map(|k| format!("-{}", k.name()))
            .unwrap_or_default();
        let cal = if self.calibrated { "cal" } else { "uncal" };
        format!("{}{}-{}-seed{}", self.pipeline, ncm, cal, self.seed)
    }

    /// Serialized form of everything that affects training. Specs with the
    /// same fingerprint can share one set of trained models; the shift only
    /// touches test rows and is applied at evaluation.
    pub fn training_fingerprint(&self) -> String {
        let key = (
            &self.base_models,
            self.seed,
            &self.dataset,
            self.has(BaseModel::Mlp).then_some(&self.mlp),
            self.has(BaseModel::Ensemble).then_some((&self.mlp, self.ensemble_size)),
            self.has(BaseModel::Priornet).then_some((
                &self.priornet,
                self.ood_source,
                self.ood_count,
                self.ood_scale,
                &self.cw,
                // The C&W source attacks an MLP trained with these settings.
                &self.mlp,
            )),
            self.has(BaseModel::Stumps).then_some(&self.stumps),
        );
        serde_json::to_string(&key).expect("spec fields serialize")
    }
}

/// Seeds derived from the master seed, one stream per consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedSeeds {
    pub data: u64,
    pub split: u64,
    pub mlp: u64,
    pub ensemble_base: u64,
    pub priornet: u64,
    pub ood: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DerivedSeeds {
    pub fn from_master(seed: u64) -> Self {
        let s = |stream: u64| splitmix64(seed ^ splitmix64(stream));
        DerivedSeeds {
            data: s(1),
            split: s(2),
            mlp: s(3),
            ensemble_base: s(4),
            priornet: s(5),
            ood: s(6),
        }
    }
}

/// Accuracy, precision, recall and F1 in percent, malware positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// No positive predictions; precision reported as 0.
    pub precision_undefined: bool,
    /// No positive labels; recall reported as 0.
    pub recall_undefined: bool,
}

pub fn classifier_metrics(predicted: &[u8], truth: &[u8]) -> Result<ClassifierMetrics> {
    check_len(predicted.len(), truth.len())?;
    if predicted.is_empty() {
        return Err(Error::invalid("metrics need at least one prediction"));
    }
    let (mut tp, mut fp, mut fneg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in predicted.iter().zip(truth) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            (0, 0) => tn += 1,
            _ => return Err(Error::invalid("labels must be 0 or 1")),
        }
    }
    let pct = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    let precision = pct(tp, tp + fp);
    let recall = pct(tp, tp + fneg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ClassifierMetrics {
        accuracy: pct(tp + tn, predicted.len()),
        precision,
        recall,
        f1,
        support: predicted.len(),
        precision_undefined: tp + fp == 0,
        recall_undefined: tp + fneg == 0,
    })
}

/// Models trained for one training fingerprint, plus the prepared data.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    fingerprint: String,
    pub seeds: DerivedSeeds,
    /// Unshifted raw features with split tags.
    pub raw: LabeledDataset,
    /// Train-split statistics applied to every neural input.
    pub standardization: Standardization,
    pub mlp: Option<MlpModel>,
    pub ensemble: Option<EnsembleModel>,
    pub priornet: Option<PriorNetModel>,
    pub stumps: Option<StumpEnsembleModel>,
}

pub(crate) fn gaussian_ood(rows: usize, cols: usize, scale: f64, seed: u64) -> Result<FeatureMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect();
    FeatureMatrix::new(rows, cols, data)
}

pub fn train_models(spec: &ExperimentSpec) -> Result<TrainedModels> {
    spec.validate()?;
    let seeds = DerivedSeeds::from_master(spec.seed);
    let ds = &spec.dataset;
    let prepared = (|| {
        let data = generate_synthetic(ds.n, ds.d, ds.class_sep, seeds.data)?;
        let raw = split(&data, (ds.fractions[0], ds.fractions[1], ds.fractions[2]), seeds.split)?;
        let standardized = standardize(&raw)?;
        Ok::<_, Error>((raw, standardized))
    })()
    .map_err(|e| e.in_stage("data"))?;
    let (raw, standardized) = prepared;

    let train = standardized.subset(Split::Train);
    let raw_train = raw.subset(Split::Train);
    let train_err = |e: Error| e.in_stage("train");
    let mlp_cfg = MlpConfig {
        seed: seeds.mlp,
        ..spec.mlp.clone()
    };

    let mlp = if spec.has(BaseModel::Mlp) {
        Some(train_mlp(&train.features, &train.labels, &mlp_cfg).map_err(train_err)?)
    } else {
        None
    };
    let ensemble = if spec.has(BaseModel::Ensemble) {
        Some(
            train_ensemble(
                &train.features,
                &train.labels,
                &spec.mlp,
                spec.ensemble_size,
                seeds.ensemble_base,
            )
            .map_err(train_err)?,
        )
    } else {
        None
    };
    let priornet = if spec.has(BaseModel::Priornet) {
        let count = spec.ood_count.max(1);
        let ood = match spec.ood_source {
            OodSource::Gaussian => gaussian_ood(count, train.dim(), spec.ood_scale, seeds.ood),
            OodSource::CwAdversarial => {
                let victim = match &mlp {
                    Some(m) => m.clone(),
                    None => train_mlp(&train.features, &train.labels, &mlp_cfg).map_err(train_err)?,
                };
                adversarial_ood(&victim, &train.features, count, &spec.cw, seeds.ood)
            }
        }
        .map_err(train_err)?;
        let cfg = PriorNetConfig {
            seed: seeds.priornet,
            ..spec.priornet.clone()
        };
        Some(train_priornet(&train.features, &train.labels, &ood, &cfg).map_err(train_err)?)
    } else {
        None
    };
    let stumps = if spec.has(BaseModel::Stumps) {
        Some(
            train_stumps(
                &raw_train.features,
                &raw_train.labels,
                spec.stumps.rounds,
                spec.stumps.learning_rate,
            )
            .map_err(train_err)?,
        )
    } else {
        None
    };

    Ok(TrainedModels {
        fingerprint: spec.training_fingerprint(),
        seeds,
        raw,
        standardization: standardized
            .standardization
            .expect("standardize records its statistics"),
        mlp,
        ensemble,
        priornet,
        stumps,
    })
}

/// C&W adversarial examples crafted from `count` training rows drawn
/// uniformly without replacement.
pub(crate) fn adversarial_ood(
    victim: &MlpModel,
    x: &FeatureMatrix,
    count: usize,
    cw: &CwConfig,
    seed: u64,
) -> Result<FeatureMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, x.rows(), count.min(x.rows()));
    let rows = picks
        .iter()
        .map(|i| cw_attack(victim, x.row(i), cw).map(|o| o.adversarial))
        .collect::<Result<Vec<_>>>()?;
    FeatureMatrix::from_rows(&rows)
}

/// Uncalibrated model outputs over one split.
struct RawOutputs {
    labels: Vec<u8>,
    stumps: Option<Vec<f64>>,
    mlp: Option<Vec<[f64; 2]>>,
    members: Option<Vec<Vec<[f64; 2]>>>,
    priornet: Option<Vec<DirichletParams>>,
}

impl TrainedModels {
    /// Model outputs on one split of `data`, which shares row order with
    /// the training data but may carry shifted test rows.
    fn outputs(&self, data: &LabeledDataset, which: Split) -> Result<RawOutputs> {
        let idx = data.indices_of(which);
        let inputs: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| {
                let mut row = data.features.row(i).to_vec();
                self.standardization.transform_row(&mut row);
                row
            })
            .collect();
        fn rows<T>(xs: &[Vec<f64>], f: impl Fn(&[f64]) -> Result<T>) -> Result<Vec<T>> {
            xs.iter().map(|x| f(x)).collect()
        }
        Ok(RawOutputs {
            labels: idx.iter().map(|&i| data.labels[i]).collect(),
            stumps: self
                .stumps
                .as_ref()
                .map(|m| idx.iter().map(|&i| m.score(data.features.row(i))).collect())
                .transpose()?,
            mlp: self.mlp.as_ref().map(|m| rows(&inputs, |x| m.logits(x))).transpose()?,
            members: self
                .ensemble
                .as_ref()
                .map(|e| rows(&inputs, |x| e.member_logits(x)))
                .transpose()?,
            priornet: self
                .priornet
                .as_ref()
                .map(|p| rows(&inputs, |x| priornet_alphas(p, x)))
                .transpose()?,
        })
    }
}

/// A fitted calibrator tagged with the model it applies to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub model: BaseModel,
    pub artifact: CalibrationArtifact,
}

#[derive(Default)]
struct Calibrators {
    stumps: Option<IsotonicMap>,
    mlp: Option<Temperature>,
    ensemble: Option<Temperature>,
    priornet: Option<Temperature>,
}

const SPLIT_ID: &str = "calibration";

fn ln_alphas(d: &DirichletParams) -> [f64; 2] {
    let a = d.alphas();
    [a[0].ln(), a[1].ln()]
}

fn mean_logits(members: &[[f64; 2]]) -> [f64; 2] {
    let m = members.len() as f64;
    let sum = members.iter().fold([0.0, 0.0], |acc, z| [acc[0] + z[0], acc[1] + z[1]]);
    [sum[0] / m, sum[1] / m]
}

impl Calibrators {
    fn fit(out: &RawOutputs) -> Result<Self> {
        let y = &out.labels;
        let bounds = (DEFAULT_T_MIN, DEFAULT_T_MAX);
        let mut c = Calibrators::default();
        if let Some(s) = &out.stumps {
            c.stumps = Some(fit_isotonic(s, y)?);
        }
        if let Some(z) = &out.mlp {
            c.mlp = Some(fit_temperature(z, y, bounds)?);
        }
        if let Some(members) = &out.members {
            // One temperature shared by all members, fitted on their mean logits.
            let z: Vec<[f64; 2]> = members.iter().map(|row| mean_logits(row)).collect();
            c.ensemble = Some(fit_temperature(&z, y, bounds)?);
        }
        if let Some(alphas) = &out.priornet {
            let z: Vec<[f64; 2]> = alphas.iter().map(ln_alphas).collect();
            c.priornet = Some(fit_temperature(&z, y, bounds)?);
        }
        Ok(c)
    }

    fn records(&self) -> Vec<CalibrationRecord> {
        let mut out = Vec::new();
        let temp = |model, t: &Option<Temperature>| {
            t.map(|temperature| CalibrationRecord {
                model,
                artifact: CalibrationArtifact::Temperature {
                    temperature,
                    split_id: SPLIT_ID.into(),
                },
            })
        };
        if let Some(map) = &self.stumps {
            out.push(CalibrationRecord {
                model: BaseModel::Stumps,
                artifact: CalibrationArtifact::Isotonic {
                    map: map.clone(),
                    split_id: SPLIT_ID.into(),
                },
            });
        }
        out.extend(temp(BaseModel::Mlp, &self.mlp));
        out.extend(temp(BaseModel::Ensemble, &self.ensemble));
        out.extend(temp(BaseModel::Priornet, &self.priornet));
        out
    }
}

fn tempered(z: [f64; 2], t: &Option<Temperature>) -> Result<ProbabilityVector> {
    apply_temperature(z, t.as_ref().unwrap_or(&Temperature::identity()))
}

fn mean_probability(ps: &[ProbabilityVector]) -> ProbabilityVector {
    let m = ps.len() as f64;
    let benign = ps.iter().map(|p| p.benign()).sum::<f64>() / m;
    let malware = ps.iter().map(|p| p.malware()).sum::<f64>() / m;
    ProbabilityVector::with_tolerance([benign, malware], 1e-9).unwrap_or_else(|_| ProbabilityVector::uniform())
}

/// Fused probabilities and uncertainty for each row of one split.
fn bundles(out: &RawOutputs, cal: &Calibrators, w: f64, eps: Epsilon) -> Result<Vec<PredictionBundle>> {
    (0..out.labels.len())
        .map(|i| {
            let mut neural = Vec::new();
            let mut uncertainty: Option<UncertaintyTriple> = None;
            if let Some(z) = &out.mlp {
                neural.push(tempered(z[i], &cal.mlp)?);
            }
            if let Some(members) = &out.members {
                let probs = members[i]
                    .iter()
                    .map(|&z| tempered(z, &cal.ensemble))
                    .collect::<Result<Vec<_>>>()?;
                let e = EnsembleOutput::from_members(probs)?;
                uncertainty = Some(ensemble_uncertainty(&e, eps)?);
                neural.push(e.mean_probs);
            }
            if let Some(alphas) = &out.priornet {
                neural.push(tempered(ln_alphas(&alphas[i]), &cal.priornet)?);
                if uncertainty.is_none() {
                    uncertainty = Some(dirichlet_uncertainty(&alphas[i], eps));
                }
            }
            let tree = out
                .stumps
                .as_ref()
                .map(|s| match &cal.stumps {
                    Some(map) => score_to_probability_pair(apply_isotonic(map, s[i]).clamp(0.0, 1.0)),
                    None => score_to_probability_pair(s[i]),
                })
                .transpose()?;
            let fused = match (neural.is_empty(), tree) {
                (false, Some(t)) => fuse(&mean_probability(&neural), &t, w)?,
                (false, None) => mean_probability(&neural),
                (true, Some(t)) => t,
                (true, None) => return Err(Error::invalid("no base model produced a prediction")),
            };
            Ok(PredictionBundle::new(fused, uncertainty))
        })
        .collect()
}

/// How the accept/reject threshold was chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    /// Name of the thresholded score.
    pub score: String,
    pub kind: ThresholdKind,
    /// θ for threshold pipelines, τ for conformal ones.
    pub value: f64,
    /// H on the calibration split; absent after a fallback.
    pub calibration_h: Option<f64>,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub crate_version: String,
    pub seeds: DerivedSeeds,
    /// Train, calibration and test sizes.
    pub split_sizes: [usize; 3],
    pub fusion_weight: Option<f64>,
    /// One split fed calibration, conformal calibration and thresholding.
    pub calibration_split_reused: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub spec: ExperimentSpec,
    pub provenance: Provenance,
    pub calibration: Vec<CalibrationRecord>,
    pub validation_metrics: ClassifierMetrics,
    pub test_metrics: ClassifierMetrics,
    /// Metrics over accepted test predictions only.
    pub accepted_metrics: Option<ClassifierMetrics>,
    pub decision: DecisionRecord,
    pub quad: ConfusionQuad,
    pub rates: Rates,
    pub acceptance_rate: f64,
    pub sweep_curve: Vec<SweepPoint>,
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Per-row scores for one pipeline, oriented by `kind`.
struct Scored {
    kind: ThresholdKind,
    name: String,
    calibration: Vec<f64>,
    test: Vec<f64>,
}

fn score_rows(
    spec: &ExperimentSpec,
    cal: &[PredictionBundle],
    cal_labels: &[u8],
    test: &[PredictionBundle],
) -> Result<Scored> {
    let ncm_all =
        |kind: NcmKind, b: &[PredictionBundle]| b.iter().map(|x| ncm_score(kind, x)).collect::<Result<Vec<_>>>();
    match spec.pipeline {
        Pipeline::ProbThreshold => Ok(Scored {
            kind: ThresholdKind::ScoreAtLeast,
            name: "predicted_probability".into(),
            calibration: cal.iter().map(|b| b.fused_probs.max()).collect(),
            test: test.iter().map(|b| b.fused_probs.max()).collect(),
        }),
        Pipeline::UncertaintyThreshold => {
            let kind = spec.effective_ncm().expect("validated");
            Ok(Scored {
                kind: ThresholdKind::ScoreAtMost,
                name: kind.name().into(),
                calibration: ncm_all(kind, cal)?,
                test: ncm_all(kind, test)?,
            })
        }
        Pipeline::IceProbNcm | Pipeline::IceUncertaintyNcm => {
            let kind = spec.effective_ncm().expect("validated");
            let calib = build_calibration(cal, cal_labels, kind)?
                .with_mode(spec.p_value_mode)
                .with_split_id(SPLIT_ID);
            let pvals = |b: &[PredictionBundle]| {
                b.iter()
                    .map(|x| p_value(&calib, x.predicted_label, ncm_score(kind, x)?))
                    .collect::<Result<Vec<_>>>()
            };
            Ok(Scored {
                kind: ThresholdKind::ScoreAtLeast,
                name: format!("p_value:{}", kind.name()),
                calibration: pvals(cal)?,
                test: pvals(test)?,
            })
        }
    }
}

/// Threshold rejecting about `fraction` of the calibration scores.
fn quantile_threshold(scores: &[f64], kind: ThresholdKind, fraction: f64) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let k = ((fraction * s.len() as f64).floor() as usize).min(s.len() - 1);
    match kind {
        ThresholdKind::ScoreAtLeast => s[k],
        ThresholdKind::ScoreAtMost => s[s.len() - 1 - k],
    }
}

fn test_sweep_grid(scores: &[f64]) -> GridSpec {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let points = if lo < hi { 101 } else { 1 };
    GridSpec::Uniform { lo, hi, points }
}

/// Evaluates `spec` with already-trained models.
pub fn evaluate(spec: &ExperimentSpec, trained: &TrainedModels) -> Result<ExperimentReport> {
    spec.validate()?;
    if spec.training_fingerprint() != trained.fingerprint {
        return Err(Error::invalid("trained models were built for a different spec"));
    }
    let mut warnings = Vec::new();
    let w = spec.effective_fusion_weight();

    let data = apply_shift(&trained.raw, &spec.shift).map_err(|e| e.in_stage("shift"))?;
    let cal_out = trained
        .outputs(&data, Split::Calibration)
        .map_err(|e| e.in_stage("predict"))?;
    let test_out = trained.outputs(&data, Split::Test).map_err(|e| e.in_stage("predict"))?;
    if cal_out.labels.is_empty() || test_out.labels.is_empty() {
        return Err(Error::invalid("calibration and test splits must be nonempty").in_stage("data"));
    }
    let calibrators = if spec.calibrated {
        Calibrators::fit(&cal_out).map_err(|e| e.in_stage("calibrate"))?
    } else {
        Calibrators::default()
    };
    let cal_b = bundles(&cal_out, &calibrators, w, spec.epsilon).map_err(|e| e.in_stage("fuse"))?;
    let test_b = bundles(&test_out, &calibrators, w, spec.epsilon).map_err(|e| e.in_stage("fuse"))?;
    let cal_pred: Vec<u8> = cal_b.iter().map(|b| b.predicted_label).collect();
    let test_pred: Vec<u8> = test_b.iter().map(|b| b.predicted_label).collect();

    let scored = score_rows(spec, &cal_b, &cal_out.labels, &test_b).map_err(|e| e.in_stage("score"))?;

    let decision = match optimize_threshold(&scored.calibration, scored.kind, &cal_pred, &cal_out.labels, &spec.grid) {
        Ok(r) => DecisionRecord {
            score: scored.name.clone(),
            kind: scored.kind,
            value: r.theta,
            calibration_h: Some(r.h),
            fallback: false,
        },
        Err(Error::Degenerate(why)) => {
            let value = if spec.pipeline.is_conformal() {
                spec.fallback_threshold
            } else {
                quantile_threshold(&scored.calibration, scored.kind, spec.fallback_threshold)
            };
            let msg = format!("threshold fallback to {value}: {why}");
            log::warn!("{}: {msg}", spec.display_name());
            warnings.push(msg);
            DecisionRecord {
                score: scored.name.clone(),
                kind: scored.kind,
                value,
                calibration_h: None,
                fallback: true,
            }
        }
        Err(e) => return Err(e.in_stage("threshold")),
    };

    let evaluated = (|| {
        let quad = tally(&scored.test, scored.kind, decision.value, &test_pred, &test_out.labels)?;
        let accepted: Vec<usize> = (0..scored.test.len())
            .filter(|&i| scored.kind.accepts(scored.test[i], decision.value))
            .collect();
        let accepted_metrics = if accepted.is_empty() {
            None
        } else {
            let p: Vec<u8> = accepted.iter().map(|&i| test_pred[i]).collect();
            let y: Vec<u8> = accepted.iter().map(|&i| test_out.labels[i]).collect();
            Some(classifier_metrics(&p, &y)?)
        };
        let curve = sweep(
            &scored.test,
            scored.kind,
            &test_pred,
            &test_out.labels,
            &test_sweep_grid(&scored.test),
        )?;
        Ok::<_, Error>((
            quad,
            accepted.len() as f64 / scored.test.len() as f64,
            accepted_metrics,
            curve,
            classifier_metrics(&cal_pred, &cal_out.labels)?,
            classifier_metrics(&test_pred, &test_out.labels)?,
        ))
    })()
    .map_err(|e| e.in_stage("evaluate"))?;
    let (quad, acceptance_rate, accepted_metrics, sweep_curve, validation_metrics, test_metrics) = evaluated;

    let r = rates(&quad);
    if r.is_degenerate() {
        warnings.push("test split has no correct or no incorrect predictions; some rates are 0 by convention".into());
    }
    let sizes = trained.raw.split_sizes();
    let fused = spec.has(BaseModel::Stumps) && spec.base_models.len() > 1;
    Ok(ExperimentReport {
        name: spec.display_name(),
        spec: spec.clone(),
        provenance: Provenance {
            crate_version: env!("CARGO_PKG_VERSION").into(),
            seeds: trained.seeds,
            split_sizes: [sizes.0, sizes.1, sizes.2],
            fusion_weight: fused.then_some(w),
            calibration_split_reused: spec.calibrated || spec.pipeline.is_conformal(),
        },
        calibration: calibrators.records(),
        validation_metrics,
        test_metrics,
        accepted_metrics,
        decision,
        quad,
        rates: r,
        acceptance_rate,
        sweep_curve,
        warnings,
    })
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let trained = train_models(spec)?;
    evaluate(spec, &trained)
}

/// One line of the cross-experiment comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub pipeline: Pipeline,
    pub ncm: String,
    pub calibrated: bool,
    pub shift_strength: f64,
    pub seed: u64,
    pub test_f1: Option<f64>,
    pub threshold: Option<f64>,
    pub ca: Option<usize>,
    pub cr: Option<usize>,
    pub ir: Option<usize>,
    pub ia: Option<usize>,
    pub ca_pct: Option<f64>,
    pub cr_pct: Option<f64>,
    pub ir_pct: Option<f64>,
    pub ia_pct: Option<f64>,
    pub error: Option<String>,
}

impl ComparisonRow {
    fn new(spec: &ExperimentSpec, outcome: &Result<ExperimentReport, String>) -> Self {
        let ok = outcome.as_ref().ok();
        ComparisonRow {
            name: spec.display_name(),
            pipeline: spec.pipeline,
            ncm: spec.effective_ncm().map_or("none", NcmKind::name).into(),
            calibrated: spec.calibrated,
            shift_strength: if spec.shift.is_identity() {
                0.0
            } else {
                spec.shift.strength
            },
            seed: spec.seed,
            test_f1: ok.map(|r| r.test_metrics.f1),
            threshold: ok.map(|r| r.decision.value),
            ca: ok.map(|r| r.quad.ca),
            cr: ok.map(|r| r.quad.cr),
            ir: ok.map(|r| r.quad.ir),
            ia: ok.map(|r| r.quad.ia),
            ca_pct: ok.map(|r| r.rates.ca_pct),
            cr_pct: ok.map(|r| r.rates.cr_pct),
            ir_pct: ok.map(|r| r.rates.ir_pct),
            ia_pct: ok.map(|r| r.rates.ia_pct),
            error: outcome.as_ref().err().cloned(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MatrixOutcome {
    /// One entry per input spec, in input order.
    pub results: Vec<Result<ExperimentReport, String>>,
    pub table: Vec<ComparisonRow>,
}

/// Runs every spec; failures are recorded per entry and do not stop the
/// others. Specs sharing a training fingerprint train once.
pub fn run_matrix(specs: &[ExperimentSpec]) -> Result<MatrixOutcome> {
    if specs.is_empty() {
        return Err(Error::invalid("experiment matrix is empty"));
    }
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    for (i, s) in specs.iter().enumerate() {
        groups.entry(s.training_fingerprint()).or_insert(i);
    }
    let trained: BTreeMap<String, Result<TrainedModels, String>> = groups
        .into_par_iter()
        .map(|(fp, i)| (fp, train_models(&specs[i]).map_err(|e| e.to_string())))
        .collect();
    let results: Vec<Result<ExperimentReport, String>> = specs
        .par_iter()
        .map(|s| {
            let t = trained[&s.training_fingerprint()].as_ref().map_err(Clone::clone)?;
            evaluate(s, t).map_err(|e| e.to_string())
        })
        .collect();
    let table = specs
        .iter()
        .zip(&results)
        .map(|(s, r)| ComparisonRow::new(s, r))
        .collect();
    Ok(MatrixOutcome { results, table })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    /// The full report.
    Json,
    /// The sweep curve only.
    Csv,
}

pub const SWEEP_CSV_HEADER: [&str; 4] = ["theta", "ca_pct", "cr_pct", "h"];

pub fn sweep_csv(curve: &[SweepPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(SWEEP_CSV_HEADER).map_err(io)?;
    for p in curve {
        w.write_record([p.theta, p.ca_pct, p.cr_pct, p.h].map(|v| v.to_string()))
            .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is ASCII"))
}

pub fn emit_report(report: &ExperimentReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report.to_json()?,
        ReportFormat::Csv => sweep_csv(&report.sweep_curve)?,
    };
    std::fs::write(path, text)?;
    Ok(())
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.into());
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let all = classifier_metrics(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!(
            (all.accuracy, all.precision, all.recall, all.f1),
            (100.0, 100.0, 100.0, 100.0)
        );
        let m = classifier_metrics(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (50.0, 50.0, 50.0, 50.0));
        let none = classifier_metrics(&[0, 0], &[1, 0]).unwrap();
        assert!(none.precision_undefined && !none.recall_undefined);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        assert!(classifier_metrics(&[1], &[1, 0]).is_err());
        assert!(classifier_metrics(&[], &[]).is_err());
    }

    #[test]
    fn spec_validation() {
        let ok = ExperimentSpec::default();
        ok.validate().unwrap();
        let bad = ExperimentSpec {
            pipeline: Pipeline::IceUncertaintyNcm,
            ncm_kind: Some(NcmKind::ExpectedEntropy),
            ..ExperimentSpec::default()
        };
        assert!(bad.validate().is_err(), "no ensemble");
        let bad = ExperimentSpec {
            pipeline: Pipeline::IceUncertaintyNcm,
            base_models: vec![BaseModel::Ensemble],
            ncm_kind: Some(NcmKind::NegPredictedProbability),
            ..ExperimentSpec::default()
        };
        assert!(bad.validate().is_err(), "probability ncm");
        let bad = ExperimentSpec {
            base_models: vec![BaseModel::Mlp, BaseModel::Mlp],
            ..ExperimentSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = ExperimentSpec {
            fusion_weight: Some(1.5),
            ..ExperimentSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fusion_weight_defaults_follow_shift() {
        let plain = ExperimentSpec::default();
        assert_eq!(plain.effective_fusion_weight(), 0.5);
        let shifted = ExperimentSpec {
            shift: ShiftSpec::affine(2.0, 1),
            ..ExperimentSpec::default()
        };
        assert_eq!(shifted.effective_fusion_weight(), 0.8);
    }

    #[test]
    fn fingerprint_ignores_evaluation_settings() {
        let a = ExperimentSpec::default();
        let b = ExperimentSpec {
            pipeline: Pipeline::IceProbNcm,
            calibrated: true,
            ..a.clone()
        };
        assert_eq!(a.training_fingerprint(), b.training_fingerprint());
        let c = ExperimentSpec { seed: 9, ..a.clone() };
        assert_ne!(a.training_fingerprint(), c.training_fingerprint());
        let shifted = ExperimentSpec {
            shift: ShiftSpec::affine(2.0, 3),
            ..a.clone()
        };
        assert_eq!(a.training_fingerprint(), shifted.training_fingerprint());
    }

    #[test]
    fn quantile_fallback() {
        let s = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        assert_eq!(quantile_threshold(&s, ThresholdKind::ScoreAtLeast, 0.1), 0.2);
        assert_eq!(quantile_threshold(&s, ThresholdKind::ScoreAtMost, 0.1), 0.9);
    }

    #[test]
    fn sweep_csv_header() {
        let csv = sweep_csv(&[SweepPoint {
            theta: 0.5,
            ca_pct: 90.0,
            cr_pct: 80.0,
            h: 84.70588235294117,
        }])
        .unwrap();
        assert!(csv.starts_with("theta,ca_pct,cr_pct,h\n"));
        assert_eq!(csv.lines().count(), 2);
    }
}
