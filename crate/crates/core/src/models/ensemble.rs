use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::{train_mlp, MlpConfig, MlpModel};
use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::numerics::ProbabilityVector;

/// Member distributions and their componentwise mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutput {
    pub member_probs: Vec<ProbabilityVector>,
    pub mean_probs: ProbabilityVector,
}

impl EnsembleOutput {
    pub fn from_members(member_probs: Vec<ProbabilityVector>) -> Result<Self> {
        if member_probs.is_empty() {
            return Err(Error::invalid("ensemble output needs at least one member"));
        }
        let m = member_probs.len() as f64;
        let mut mean = [0.0; 2];
        for p in &member_probs {
            mean[0] += p.benign();
            mean[1] += p.malware();
        }
        mean[0] /= m;
        mean[1] /= m;
        Ok(EnsembleOutput {
            member_probs,
            mean_probs: ProbabilityVector::from_raw(mean),
        })
    }

    pub fn len(&self) -> usize {
        self.member_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_probs.is_empty()
    }
}

/// M independently seeded MLPs sharing one architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub members: Vec<MlpModel>,
    pub member_seeds: Vec<u64>,
}

/// Trains `m` members with seeds `base_seed..base_seed + m`. Members train
/// in parallel; each is deterministic on its own, so the result does not
/// depend on scheduling.
pub fn train_ensemble(
    x: &FeatureMatrix,
    labels: &[u8],
    config: &MlpConfig,
    m: usize,
    base_seed: u64,
) -> Result<EnsembleModel> {
    if m == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    let seeds: Vec<u64> = (0..m as u64).map(|k| base_seed.wrapping_add(k)).collect();
    let members = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = MlpConfig { seed, ..config.clone() };
            train_mlp(x, labels, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleModel {
        members,
        member_seeds: seeds,
    })
}

impl EnsembleModel {
    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    pub fn member_logits(&self, x: &[f64]) -> Result<Vec<[f64; 2]>> {
        self.members.iter().map(|m| m.logits(x)).collect()
    }

    /// Componentwise mean of member logits.
    pub fn mean_logits(&self, x: &[f64]) -> Result<[f64; 2]> {
        let zs = self.member_logits(x)?;
        let m = zs.len() as f64;
        Ok([
            zs.iter().map(|z| z[0]).sum::<f64>() / m,
            zs.iter().map(|z| z[1]).sum::<f64>() / m,
        ])
    }
}

/// Per-member softmax outputs and their arithmetic mean.
pub fn ensemble_predict(e: &EnsembleModel, x: &[f64]) -> Result<EnsembleOutput> {
    let probs = e
        .members
        .iter()
        .map(|m| m.predict_proba(x).map(|(_, p)| p))
        .collect::<Result<Vec<_>>>()?;
    EnsembleOutput::from_members(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn p(a: f64) -> ProbabilityVector {
        ProbabilityVector::new(a, 1.0 - a).unwrap()
    }

    fn cfg() -> MlpConfig {
        MlpConfig {
            layer_sizes: vec![8, 8],
            epochs: 60,
            ..MlpConfig::default()
        }
    }

    #[test]
    fn mean_of_opposites_is_uniform() {
        let out = EnsembleOutput::from_members(vec![p(1.0), p(0.0)]).unwrap();
        assert_eq!(out.mean_probs.as_array(), [0.5, 0.5]);
        let same = EnsembleOutput::from_members(vec![p(0.3); 4]).unwrap();
        assert!((same.mean_probs.benign() - 0.3).abs() < 1e-15);
        assert!(EnsembleOutput::from_members(vec![]).is_err());
    }

    #[test]
    fn single_member_matches_its_model() {
        let d = generate_synthetic(80, 2, 3.0, 2).unwrap();
        let e = train_ensemble(&d.features, &d.labels, &cfg(), 1, 4).unwrap();
        let single = train_mlp(&d.features, &d.labels, &MlpConfig { seed: 4, ..cfg() }).unwrap();
        for row in d.features.iter_rows().take(10) {
            let out = ensemble_predict(&e, row).unwrap();
            assert_eq!(out.mean_probs, single.predict_proba(row).unwrap().1);
        }
    }

    #[test]
    fn zero_members_is_an_error() {
        let d = generate_synthetic(20, 2, 3.0, 2).unwrap();
        assert!(train_ensemble(&d.features, &d.labels, &cfg(), 0, 0).is_err());
    }

    #[test]
    fn ensembles_are_reproducible() {
        let d = generate_synthetic(60, 2, 3.0, 2).unwrap();
        let a = train_ensemble(&d.features, &d.labels, &cfg(), 3, 10).unwrap();
        let b = train_ensemble(&d.features, &d.labels, &cfg(), 3, 10).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.member_seeds, vec![10, 11, 12]);
        let probe = [0.3, -0.2];
        assert_eq!(
            ensemble_predict(&a, &probe).unwrap(),
            ensemble_predict(&b, &probe).unwrap()
        );
    }
}
