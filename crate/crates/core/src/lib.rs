//! Selective prediction for binary classifiers under covariate shift.
//!
//! The crate trains small neural and boosted-stump detectors, calibrates
//! them, fuses their scores, measures ensemble and Dirichlet uncertainty,
//! and decides per example whether to trust a prediction. Decisions come
//! either from a tuned threshold on a score or from inductive conformal
//! p-values.

pub mod calibration;
pub mod conformal;
pub mod data;
pub mod decision;
pub mod error;
pub mod harness;
pub mod models;
pub mod numerics;
pub mod uncertainty;
pub mod workflow;

pub use error::{Error, Result};

/// The guide's snippets run as doc-tests so the book cannot drift from the
/// code.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/models.md")]
    struct Models;
    #[doc = include_str!("../../../book/src/uncertainty.md")]
    struct Uncertainty;
    #[doc = include_str!("../../../book/src/calibration.md")]
    struct Calibration;
    #[doc = include_str!("../../../book/src/conformal.md")]
    struct Conformal;
    #[doc = include_str!("../../../book/src/decisions.md")]
    struct Decisions;
    #[doc = include_str!("../../../book/src/harness.md")]
    struct Harness;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
