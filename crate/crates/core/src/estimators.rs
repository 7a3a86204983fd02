//! Closed-form weighted linear estimators.
//!
//! The central object is the range-constrained weighted estimator
//!
//! ```text
//! theta(C, V) = argmin ||y - X theta||^2_{V^+} + ||theta||^2_{C^+}
//!               s.t. y - X theta in R(V), theta in R(C)
//! ```
//!
//! which exists iff `y in R(R)` with `R = X C X^T + V`, and then equals
//! `C X^T R^+ y`. BLUE, the MSE-optimal estimator and LMMSE are all members of
//! this family for particular weights.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{general_pseudo_inverse, numerical_rank, PsdMatrix, DEFAULT_FEASIBILITY_TOL};

/// Regressors `X` (n x d) and response `y` (n).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "design matrix must be non-empty, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        check_dim("dataset response length", x.nrows(), y.len())?;
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("dataset has non-finite entries".into()));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Number of regressors.
    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// `X^T X`.
    pub fn gram(&self) -> DMatrix<f64> {
        self.x.tr_mul(&self.x)
    }

    pub fn residual(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.y - &self.x * theta
    }
}

/// Prior weight `C` (d x d) and noise weight `V` (n x n).
#[derive(Debug, Clone)]
pub struct WeightPair {
    pub c: PsdMatrix,
    pub v: PsdMatrix,
}

impl WeightPair {
    pub fn new(c: PsdMatrix, v: PsdMatrix) -> Self {
        Self { c, v }
    }

    /// `(alpha C, alpha V)`; the estimate does not depend on `alpha`.
    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        Ok(Self {
            c: self.c.scaled(alpha)?,
            v: self.v.scaled(alpha)?,
        })
    }

    fn check(&self, data: &Dataset) -> Result<()> {
        check_dim("prior weight C", data.d(), self.c.dim())?;
        check_dim("noise weight V", data.n(), self.v.dim())
    }
}

/// Non-fatal findings attached to an estimate.
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    /// `X` is column-rank deficient, so the BLUE interpretation does not apply.
    RankDeficientDesign { rank: usize, columns: usize },
    /// A range postcondition holds only up to the reported relative gap.
    ConstraintResidual { constraint: &'static str, gap: f64 },
    /// The covariance-fitting identity `J = fit / ||y||^2 + 2` is off by more
    /// than the reporting tolerance.
    IdentityMismatch { residual: f64 },
    /// Recomputing the estimate from the recovered weights does not reproduce
    /// the solver output to the reporting tolerance.
    RoundTripMismatch { gap: f64 },
    /// The recovered weights do not admit a feasible estimate numerically.
    RecoveredWeightsInfeasible { gap: f64 },
    /// A nonzero minimizer in the null space of `X` was replaced by zero.
    NullSpaceMinimizerReplaced,
    /// A user-supplied regularization parameter replaced the tuned one, so the
    /// recovered weights need not reproduce the estimate.
    LambdaOverride { tuned: f64, used: f64 },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::RankDeficientDesign { rank, columns } => write!(
                f,
                "design matrix has rank {rank} < {columns} columns; BLUE optimality does not apply"
            ),
            Diagnostic::ConstraintResidual { constraint, gap } => {
                write!(f, "constraint {constraint} holds only to relative gap {gap:e}")
            }
            Diagnostic::IdentityMismatch { residual } => {
                write!(f, "covariance-fitting identity residual {residual:e} exceeds tolerance")
            }
            Diagnostic::RoundTripMismatch { gap } => {
                write!(f, "estimate from recovered weights differs by relative {gap:e}")
            }
            Diagnostic::RecoveredWeightsInfeasible { gap } => {
                write!(f, "recovered weights leave y outside R(XCX^T + V) (relative gap {gap:e})")
            }
            Diagnostic::NullSpaceMinimizerReplaced => {
                write!(f, "minimizer lay in the null space of X and was replaced by zero")
            }
            Diagnostic::LambdaOverride { tuned, used } => {
                write!(f, "lambda {used} overrides the tuned value {tuned}")
            }
        }
    }
}

/// Output of the closed-form estimators.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub theta: DVector<f64>,
    /// `||R R^+ y - y|| / ||y||` for the covariance `R` the estimate was built on.
    pub residual_range_gap: f64,
    /// Value of the weighted criterion at `theta`.
    pub objective: f64,
    pub weights_used: WeightPair,
    pub diagnostics: Vec<Diagnostic>,
}

/// `R = X C X^T + V`.
pub fn covariance(w: &WeightPair, data: &Dataset) -> Result<PsdMatrix> {
    w.check(data)?;
    let x = data.x();
    let r = x * w.c.matrix() * x.transpose() + w.v.matrix();
    let r = (&r + r.transpose()) * 0.5;
    PsdMatrix::with_rank_tol(r, w.c.rank_tol().max(w.v.rank_tol()))
}

/// The linear map `K = C X^T R^+` of the weighted estimator.
pub fn weighted_gain(w: &WeightPair, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("prior weight C", x.ncols(), w.c.dim())?;
    check_dim("noise weight V", x.nrows(), w.v.dim())?;
    let r = x * w.c.matrix() * x.transpose() + w.v.matrix();
    let r = PsdMatrix::with_rank_tol((&r + r.transpose()) * 0.5, w.c.rank_tol())?;
    Ok(w.c.matrix() * x.transpose() * r.pseudo_inverse().matrix())
}

fn push_range_check(
    diagnostics: &mut Vec<Diagnostic>,
    constraint: &'static str,
    m: &PsdMatrix,
    v: &DVector<f64>,
) {
    let gap = m.range_gap(v);
    if gap > DEFAULT_FEASIBILITY_TOL {
        diagnostics.push(Diagnostic::ConstraintResidual { constraint, gap });
    }
}

/// `theta(C, V) = C X^T R^+ y`, or an infeasibility error when `y` is not in
/// the range of `R = X C X^T + V`.
pub fn estimate_weighted(w: &WeightPair, data: &Dataset) -> Result<EstimateReport> {
    let r = covariance(w, data)?;
    let y = data.y();
    let gap = r.range_gap(y);
    if gap > DEFAULT_FEASIBILITY_TOL {
        return Err(Error::Infeasible {
            check: "y in R(X C X^T + V)",
            gap,
        });
    }
    let r_pinv_y = r.pinv_mul(y);
    let theta = w.c.matrix() * (data.x().tr_mul(&r_pinv_y));
    let residual = data.residual(&theta);

    let mut diagnostics = Vec::new();
    push_range_check(&mut diagnostics, "theta in R(C)", &w.c, &theta);
    push_range_check(&mut diagnostics, "y - X theta in R(V)", &w.v, &residual);

    let objective = w.v.pinv_quadratic(&residual) + w.c.pinv_quadratic(&theta);
    Ok(EstimateReport {
        theta,
        residual_range_gap: gap,
        objective,
        weights_used: w.clone(),
        diagnostics,
    })
}

/// The linear map of the constrained weighted least-squares estimator,
/// `K = X^+ [I - V M (M V M)^+ M]` with `M = I - X X^+`.
pub fn blue_gain(v: &PsdMatrix, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("noise weight V", x.nrows(), v.dim())?;
    let n = x.nrows();
    let x_pinv = general_pseudo_inverse(x, v.rank_tol());
    let m = DMatrix::identity(n, n) - x * &x_pinv;
    let m = (&m + m.transpose()) * 0.5;
    let mvm = &m * v.matrix() * &m;
    let mvm = PsdMatrix::with_rank_tol((&mvm + mvm.transpose()) * 0.5, v.rank_tol())?;
    let inner = DMatrix::identity(n, n) - v.matrix() * &m * mvm.pseudo_inverse().matrix() * &m;
    Ok(x_pinv * inner)
}

/// Minimizer of `||y - X theta||^2_{V^+}` subject to `y - X theta in R(V)`.
///
/// With full-column-rank `X` and `V` proportional to the noise covariance this
/// is the best linear unbiased estimator. Rank-deficient `X` still yields the
/// closed-form output, flagged with [`Diagnostic::RankDeficientDesign`].
pub fn blue(v: &PsdMatrix, data: &Dataset) -> Result<EstimateReport> {
    check_dim("noise weight V", data.n(), v.dim())?;
    let x = data.x();
    let y = data.y();
    let xxt = x * x.transpose() + v.matrix();
    let feas = PsdMatrix::with_rank_tol((&xxt + xxt.transpose()) * 0.5, v.rank_tol())?;
    let gap = feas.range_gap(y);
    if gap > DEFAULT_FEASIBILITY_TOL {
        return Err(Error::Infeasible {
            check: "y in R(X X^T + V)",
            gap,
        });
    }

    let theta = blue_gain(v, x)? * y;
    let residual = data.residual(&theta);
    let mut diagnostics = Vec::new();
    let rank = numerical_rank(x, v.rank_tol());
    if rank < data.d() {
        diagnostics.push(Diagnostic::RankDeficientDesign {
            rank,
            columns: data.d(),
        });
    }
    push_range_check(&mut diagnostics, "y - X theta in R(V)", v, &residual);

    Ok(EstimateReport {
        objective: v.pinv_quadratic(&residual),
        theta,
        residual_range_gap: gap,
        weights_used: WeightPair::new(PsdMatrix::zeros(data.d()), v.clone()),
        diagnostics,
    })
}

/// `true` iff `V^+ V X = X`, i.e. the range of `X` lies in the range of `V`.
/// In that case the range constraint in [`blue`] is inactive.
pub fn noise_range_covers_design(v: &PsdMatrix, x: &DMatrix<f64>) -> Result<bool> {
    check_dim("noise weight V", x.nrows(), v.dim())?;
    Ok(x.column_iter()
        .all(|col| v.range_gap(&col.into_owned()) <= DEFAULT_FEASIBILITY_TOL))
}

/// Weights `(alpha theta theta^T, alpha V)` that minimize the MSE among all
/// linear estimators for a known parameter `theta`.
pub fn oracle_mse_weights(theta_true: &DVector<f64>, v_true: &PsdMatrix, alpha: f64) -> Result<WeightPair> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidInput(format!("alpha must be positive, got {alpha}")));
    }
    Ok(WeightPair::new(
        PsdMatrix::outer(theta_true, alpha)?,
        v_true.scaled(alpha)?,
    ))
}

/// Linear minimum mean-square error estimator for prior covariance `C` and
/// noise covariance `V`.
pub fn lmmse(c_prior: &PsdMatrix, v_noise: &PsdMatrix, data: &Dataset) -> Result<EstimateReport> {
    estimate_weighted(&WeightPair::new(c_prior.clone(), v_noise.clone()), data)
}

/// `tr{(I - K X) C (I - K X)^T + K V K^T}`: the MSE of `theta = K y`
/// marginalized over a prior with covariance `C`.
pub fn marginal_mse_of_linear(k: &DMatrix<f64>, c: &PsdMatrix, v: &PsdMatrix, x: &DMatrix<f64>) -> Result<f64> {
    let (n, d) = x.shape();
    check_dim("gain rows", d, k.nrows())?;
    check_dim("gain columns", n, k.ncols())?;
    check_dim("prior weight C", d, c.dim())?;
    check_dim("noise weight V", n, v.dim())?;
    let bias = DMatrix::identity(d, d) - k * x;
    let total = &bias * c.matrix() * bias.transpose() + k * v.matrix() * k.transpose();
    Ok(total.trace().max(0.0))
}
