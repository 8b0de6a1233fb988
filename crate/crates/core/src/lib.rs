//! Instrumental-variable estimation under endogenous heteroskedasticity.
//!
//! The first stage recovers complier means `delta_d(x)` and variances
//! `V_d(x)` from kernel covariance ratios; the second stage is an IV
//! regression weighted by the inverse complier scale `S`, run on the
//! observations that survive trimming.

pub mod cli_io;
pub mod effects;
pub mod error;
pub mod estimator;
pub mod first_stage;
pub mod inference;
pub mod kernels;
mod linalg;
pub mod pipeline;
pub mod sample;
pub mod simulate;
pub mod smoothing;

pub use error::{EhivError, Result};
pub use estimator::{fit_ehiv, fit_iv, fit_ols, EhivFit, LinearFit};
pub use first_stage::{estimate_first_stage, trim_mask, FirstStage, FirstStageMode, TrimmingSpec};
pub use kernels::{eval_kernel, resolve_bandwidth, BandwidthRule, KernelFamily, KernelSpec};
pub use linalg::median;
pub use pipeline::{EhivModel, EstimatorConfig};
pub use sample::{Covariates, Sample};
