//! Reference classifiers: softmax MLP, deep ensemble, prior network and
//! boosted stumps, plus the C&W attack and score fusion.

mod attack;
mod ensemble;
mod fusion;
mod mlp;
mod network;
mod persist;
mod priornet;
mod stumps;

pub use attack::{cw_attack, cw_objective, CwConfig, CwOutcome, LinearModel};
pub use ensemble::{ensemble_predict, train_ensemble, EnsembleModel, EnsembleOutput};
pub use fusion::{fuse, score_to_probability_pair};
pub use mlp::{train_mlp, MlpConfig, MlpModel};
pub use network::Layout;
pub use persist::{ModelDocument, SavedModel, MODEL_FORMAT, MODEL_VERSION};
pub use priornet::{
    dirichlet_reverse_kl, priornet_alphas, train_priornet, DirichletParams, PriorNetConfig, PriorNetLoss,
    PriorNetModel, ALPHA_FLOOR,
};
pub use stumps::{train_stumps, Stump, StumpEnsembleModel};

/// A model exposing two logits and vector-Jacobian products w.r.t. its
/// input. Required by the C&W attack.
pub trait Differentiable {
    fn input_dim(&self) -> usize;

    fn logits(&self, x: &[f64]) -> [f64; 2];

    /// Returns (∂z/∂x)ᵀ · dz.
    fn logit_vjp(&self, x: &[f64], dz: [f64; 2]) -> Vec<f64>;
}
