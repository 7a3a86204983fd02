use thiserror::Error;

/// Errors produced by the estimators, solvers and experiment harness.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix is not positive semi-definite: eigenvalue {eigenvalue:e} is below -{tolerance:e}")]
    NotPsd { eigenvalue: f64, tolerance: f64 },

    /// A range-membership constraint cannot be met. `check` names the
    /// constraint that failed, `gap` is its relative residual.
    #[error("infeasible problem: {check} does not hold (relative gap {gap:e})")]
    Infeasible { check: &'static str, gap: f64 },

    #[error("infimum is not attained by any finite weight: {0}")]
    NotAttained(String),

    #[error(
        "an unstructured noise weight explains the data completely (V = yy^T, C = 0) \
         and forces the estimate to zero; choose a scaled-identity or diagonal noise structure"
    )]
    UnstructuredNoise,

    #[error("an unstructured prior has no single regularization parameter; the penalty is the seminorm ||theta||_T / sqrt(n)")]
    NoSingleLambda,

    #[error("degenerate prior: tr(C) = 0")]
    DegeneratePrior,

    #[error("solver did not converge within {iterations} iterations (certificate gap {gap:e})")]
    NotConverged { iterations: usize, gap: f64 },

    #[error("{failed} of {trials} Monte Carlo trials failed, exceeding the 1% limit")]
    TooManyFailedTrials { failed: usize, trials: usize },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
