//! Minimum-norm interpolation under correlated noise: finite-sample and
//! limiting risks, with Monte Carlo machinery to check them.

// `!(x > 0.0)` is the NaN-rejecting form used throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod config;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod linalg;
pub mod models;
pub mod results;
pub mod risk;
pub mod sampler;
pub mod verify;

pub use config::{Experiment, ExperimentConfig, Overrides};
pub use error::{Error, Result};
pub use estimator::Target;
pub use linalg::{Matrix, Vector};
pub use models::{FeatureModel, FeatureSpec, NoiseCovariance, NoiseSpec};
pub use results::ResultTable;
pub use risk::{Estimate, McConfig};
pub use sampler::RandomStream;
pub use verify::{run_verify, VerifyReport};
