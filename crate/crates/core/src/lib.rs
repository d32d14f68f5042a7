//! Optimal control of positive linear systems with linear costs and constraints, with a
//! data-driven adaptive controller and robustness certificates.

pub mod certify;
pub mod controller;
pub mod dp;
pub mod error;
pub mod estimator;
pub mod fixtures;
pub mod generate;
pub mod harness;
pub mod linalg;
pub mod problem;
pub mod ssp;

pub use error::{Error, Result};
pub use problem::{GainMatrix, PositiveProblem};
