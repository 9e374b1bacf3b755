//! Numerics for single-step test-time training (TTT) of a one-layer linear
//! attention model on Gaussian linear-regression prompts.
//!
//! Modules, bottom up:
//!
//! - [`linalg`]: dense matrices, Gaussian sampling, orthonormal bases.
//! - [`model`]: the attention predictor, prompt sampling, TTT gradient steps.
//! - [`closed_form`]: exact population loss, pretrained and optimal weights.
//! - [`theory`]: asymptotic step sizes, improvements and thresholds.
//! - [`montecarlo`]: the trial engine and estimators used as oracles.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod closed_form;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod theory;

use alloc::string::String;

/// Errors shared by every module.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand dimensions do not fit together.
    #[error("shape error: {0}")]
    Shape(String),
    /// A value is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A theory formula was asked for outside the regime it was derived in.
    #[error("unsupported regime: {0}")]
    UnsupportedRegime(String),
}

pub use closed_form::LossBreakdown;
pub use linalg::{DenseMatrix, DenseVector, RngState};
pub use model::{AttentionWeights, CovarianceModel, StepSchedule, TaskInstance, TestTimeSet};
pub use montecarlo::{EtaPolicy, InitPolicy, MCEstimate, Sampler, Schedule, TrialConfig};
pub use theory::{AlignmentQuantities, Regime, TheoryReport};
