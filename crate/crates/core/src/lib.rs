//! High-dimensional covariate balancing propensity score (HD-CBPS)
//! estimation of average treatment effects.
//!
//! The estimator runs in four stages: a penalized quasi-likelihood fit of the
//! propensity score ([`propensity`]), a penalized weighted outcome regression
//! on the treated ([`outcome`]), recalibration of the propensity coefficients
//! on the outcome model's support so the selected covariates balance exactly
//! ([`balance`]), and inverse probability weighting with plug-in variance
//! ([`estimate`]). [`simulate`] reproduces the benchmark simulation study.

pub mod balance;
pub mod error;
pub mod estimate;
pub mod model;
pub mod optimize;
pub mod outcome;
pub mod propensity;
pub mod simulate;

pub use error::{Error, Result};
pub use estimate::{
    estimate_ate, estimate_mu1, ArmEstimate, EffectEstimate, EstimatorConfig, OutcomeModel,
    PenaltySpec,
};
pub use model::{Dataset, Family, Link, OutcomeWeight, PropensityWeight, PropensityWeightKind};
