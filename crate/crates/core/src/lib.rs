//! Weighted linear estimation with covariance-fitting weights and the
//! tuned regularization it implies.
//!
//! - [`linalg`]: PSD matrices, pseudoinverses, range tests.
//! - [`estimators`]: the weighted estimator, BLUE and LMMSE.
//! - [`covfit`]: covariance-fitting criteria and the tuned estimator.
//! - [`solvers`]: convex minimizers for the tuned criteria.
//! - [`experiments`]: Monte Carlo NMSE studies.

pub mod covfit;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod linalg;
pub mod solvers;

pub use covfit::{tuned_estimate, CovStructure, Criterion, Fit, Penalty, TuneOptions, TunedEstimate};
pub use error::{Error, Result};
pub use estimators::{blue, estimate_weighted, lmmse, Dataset, Diagnostic, EstimateReport, WeightPair};
pub use linalg::PsdMatrix;
pub use solvers::{solve, SolveResult, SolverOptions};
