//! Sparse penalized maximum-likelihood estimation of cointegrating vectors.

pub mod error;
pub mod estimator;
pub mod forecast;
pub mod inference;
pub mod rank;
pub mod simulation;
pub mod solvers;
pub mod tuning;
pub mod vecm;

pub use error::{Error, Result};
pub use vecm::{build_design, BetaPenalty, PenaltyConfig, TimeSeriesMatrix, VecmDesign};
