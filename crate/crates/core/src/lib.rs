//! Estimating how much crime goes unreported, and arrest probabilities over
//! all offenses, by combining a victimization survey with police records.
//!
//! The survey gives a reporting-propensity model π(z; γ); reported records
//! are then reweighted by 1/π̂ to estimate the total number of offenses,
//! reporting and arrest rates, and covariate effects on arrest, with
//! standard errors that carry the survey's sampling uncertainty.

pub mod config;
pub mod design_glm;
pub mod diagnostics;
pub mod error;
pub mod gee_twostep;
pub mod io;
pub mod linalg;
mod logit;
pub mod pipeline;
pub mod report;
pub mod reweight;
pub mod seed;
pub mod simgen;
pub mod twostep_logit;

pub use error::{Error, Result};
pub use logit::SolverConfig;
