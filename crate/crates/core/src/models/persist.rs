//! Versioned JSON documents for trained models.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EnsembleModel, MlpModel, PriorNetModel, StumpEnsembleModel};
use crate::data::Standardization;
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "shiftguard-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SavedModel {
    Mlp(MlpModel),
    Ensemble(EnsembleModel),
    Priornet(PriorNetModel),
    Stumps(StumpEnsembleModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub version: u32,
    pub model: SavedModel,
    /// Statistics applied to raw features before a neural model sees them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
}

impl ModelDocument {
    pub fn new(model: SavedModel) -> Self {
        ModelDocument {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            model,
            standardization: None,
        }
    }

    pub fn with_standardization(mut self, stats: Standardization) -> Self {
        self.standardization = Some(stats);
        self
    }

    /// Copies `row` and applies the stored standardization, if any.
    pub fn prepare_input(&self, row: &[f64]) -> Vec<f64> {
        let mut x = row.to_vec();
        if let Some(s) = &self.standardization {
            s.transform_row(&mut x);
        }
        x
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.format != MODEL_FORMAT {
            return Err(Error::invalid(format!("not a model document: format {:?}", doc.format)));
        }
        if doc.version != MODEL_VERSION {
            return Err(Error::invalid(format!("unsupported model version {}", doc.version)));
        }
        doc.model.check()?;
        if let Some(s) = &doc.standardization {
            if s.mean.len() != doc.model.input_dim() || s.std.len() != s.mean.len() {
                return Err(Error::invalid("standardization does not match the model input"));
            }
        }
        Ok(doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl SavedModel {
    pub fn input_dim(&self) -> usize {
        match self {
            SavedModel::Mlp(m) => m.input_dim(),
            SavedModel::Ensemble(e) => e.input_dim(),
            SavedModel::Priornet(p) => p.input_dim(),
            SavedModel::Stumps(s) => s.input_dim,
        }
    }

    fn check(&self) -> Result<()> {
        match self {
            SavedModel::Mlp(m) => m.check_consistency(),
            SavedModel::Ensemble(e) => {
                if e.members.is_empty() || e.members.len() != e.member_seeds.len() {
                    return Err(Error::invalid("ensemble members and seeds disagree"));
                }
                e.members.iter().try_for_each(MlpModel::check_consistency)
            }
            SavedModel::Priornet(p) => p.check_consistency(),
            SavedModel::Stumps(s) => {
                if s.stumps.iter().any(|st| st.feature >= s.input_dim) {
                    return Err(Error::invalid("stump feature index out of range"));
                }
                Ok(())
            }
        }
    }
}
