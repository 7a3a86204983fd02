//! Covariance fitting: choosing the weights `(C, V)` from the data alone.
//!
//! The weights minimize `||y y^T - R||^2_{R^+}` over a structure family
//! subject to `y in R(R)`. Swapping the order of minimization turns this into
//! a problem in `theta` alone,
//!
//! ```text
//! G(theta) = h(y - X theta, I; S_V) + h(theta, X^T X; S_C)
//! ```
//!
//! where `h` has a closed form for scaled-identity, diagonal and unstructured
//! families. Each `(S_C, S_V)` pair makes `G` proportional to a familiar
//! regularized regression criterion with a data-determined `lambda`, and the
//! weights are recovered from its minimizer with the attaining formulas.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::estimators::{covariance, estimate_weighted, Dataset, Diagnostic, EstimateReport, WeightPair};
use crate::linalg::{general_pseudo_inverse, PsdMatrix, DEFAULT_FEASIBILITY_TOL, DEFAULT_RANK_TOL};
use crate::solvers::{solve, SolveResult, SolverOptions};

/// Reporting tolerance for the covariance-fitting identity and the
/// weight round trip. Misses are warnings, not errors.
pub const IDENTITY_TOL: f64 = 1e-6;
pub const ROUND_TRIP_TOL: f64 = 1e-5;
const ROUND_TRIP_FLOOR: f64 = 1e-8;

/// Family a weight matrix is restricted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovStructure {
    /// `{kappa I : kappa >= 0}`
    ScaledIdentity,
    /// `{diag(a) : a_i >= 0}`
    Diagonal,
    /// All PSD matrices.
    Unstructured,
}

impl CovStructure {
    pub const ALL: [CovStructure; 3] = [
        CovStructure::ScaledIdentity,
        CovStructure::Diagonal,
        CovStructure::Unstructured,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CovStructure::ScaledIdentity => "scaled-identity",
            CovStructure::Diagonal => "diagonal",
            CovStructure::Unstructured => "unstructured",
        }
    }
}

impl fmt::Display for CovStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CovStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scaled-identity" | "identity" | "scalar" | "ci" => Ok(CovStructure::ScaledIdentity),
            "diagonal" | "diag" => Ok(CovStructure::Diagonal),
            "unstructured" | "full" | "psd" => Ok(CovStructure::Unstructured),
            other => Err(Error::InvalidInput(format!(
                "unknown covariance structure `{other}` (expected scaled-identity, diagonal or unstructured)"
            ))),
        }
    }
}

/// Data-fitting term of a regularized criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fit {
    /// `sqrt(MSPE) = ||y - X theta||_2 / sqrt(n)`
    SqrtMspe,
    /// `MAD = ||y - X theta||_1 / n`
    Mad,
}

/// Penalty term of a regularized criterion.
#[derive(Debug, Clone)]
pub enum Penalty {
    /// `||theta||_2`
    L2,
    /// `sum_j w_j |theta_j|`
    WeightedL1(DVector<f64>),
    /// `||theta||_W = sqrt(theta^T W theta)`
    WeightedL2Seminorm(PsdMatrix),
}

impl Penalty {
    pub fn name(&self) -> &'static str {
        match self {
            Penalty::L2 => "l2",
            Penalty::WeightedL1(_) => "wl1",
            Penalty::WeightedL2Seminorm(_) => "seminorm",
        }
    }

    pub fn value(&self, theta: &DVector<f64>) -> f64 {
        match self {
            Penalty::L2 => theta.norm(),
            Penalty::WeightedL1(w) => w.iter().zip(theta.iter()).map(|(w, t)| w * t.abs()).sum(),
            Penalty::WeightedL2Seminorm(m) => theta.dot(&(m.matrix() * theta)).max(0.0).sqrt(),
        }
    }
}

/// `fit(theta) + lambda * penalty(theta)`.
#[derive(Debug, Clone)]
pub struct Criterion {
    pub fit: Fit,
    pub penalty: Penalty,
    pub lambda: f64,
}

impl Criterion {
    pub fn new(fit: Fit, penalty: Penalty, lambda: f64) -> Self {
        Self { fit, penalty, lambda }
    }

    /// Short label such as `l2-wl1` (fit, then penalty).
    pub fn label(&self) -> String {
        let fit = match self.fit {
            Fit::SqrtMspe => "l2",
            Fit::Mad => "l1",
        };
        format!("{fit}-{}", self.penalty.name())
    }
}

/// `sqrt(diag(T))`, the root-mean-square of each regressor column.
pub fn column_rms(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| (c.norm_squared() / n).sqrt()))
}

/// `T = X^T X / n`.
pub fn sample_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.tr_mul(x) / x.nrows() as f64
}

/// Regularization parameter implied by the prior structure:
/// `sqrt(tr{T} / n)` for a scaled identity and `1 / sqrt(n)` for a diagonal.
pub fn tuned_lambda(s_c: CovStructure, x: &DMatrix<f64>) -> Result<f64> {
    let n = x.nrows() as f64;
    match s_c {
        CovStructure::ScaledIdentity => Ok((x.norm_squared() / n / n).sqrt()),
        CovStructure::Diagonal => Ok(1.0 / n.sqrt()),
        CovStructure::Unstructured => Err(Error::NoSingleLambda),
    }
}

/// The regularized criterion whose minimizers are the covariance-fitting
/// estimates for the given structure pair.
pub fn tuned_criterion_for_design(s_c: CovStructure, s_v: CovStructure, x: &DMatrix<f64>) -> Result<Criterion> {
    let fit = match s_v {
        CovStructure::ScaledIdentity => Fit::SqrtMspe,
        CovStructure::Diagonal => Fit::Mad,
        CovStructure::Unstructured => return Err(Error::UnstructuredNoise),
    };
    let n = x.nrows() as f64;
    Ok(match s_c {
        CovStructure::ScaledIdentity => Criterion::new(fit, Penalty::L2, tuned_lambda(s_c, x)?),
        CovStructure::Diagonal => Criterion::new(fit, Penalty::WeightedL1(column_rms(x)), tuned_lambda(s_c, x)?),
        CovStructure::Unstructured => Criterion::new(
            fit,
            Penalty::WeightedL2Seminorm(PsdMatrix::new(sample_covariance(x))?),
            1.0 / n.sqrt(),
        ),
    })
}

pub fn tuned_criterion(s_c: CovStructure, s_v: CovStructure, data: &Dataset) -> Result<Criterion> {
    tuned_criterion_for_design(s_c, s_v, data.x())
}

/// `G(theta) = (2 n / ||y||) * criterion(theta)` for every structure pair
/// handled by [`tuned_criterion`].
pub fn criterion_scale(data: &Dataset) -> f64 {
    2.0 * data.n() as f64 / data.y().norm()
}

fn require_nonzero_y(data: &Dataset) -> Result<f64> {
    let norm = data.y().norm();
    if norm == 0.0 {
        Err(Error::InvalidInput("response vector y is zero".into()))
    } else {
        Ok(norm)
    }
}

/// `||y y^T - R||^2_{R^+}` for `R = X C X^T + V`, evaluated through the
/// expansion `||y||^2 ||y||^2_{R^+} + tr{R} - 2 ||y||^2` (valid for `y in R(R)`).
pub fn spice_criterion(w: &WeightPair, data: &Dataset) -> Result<f64> {
    let y_norm = require_nonzero_y(data)?;
    let r = covariance(w, data)?;
    let gap = r.range_gap(data.y());
    if gap > DEFAULT_FEASIBILITY_TOL {
        return Err(Error::Infeasible {
            check: "y in R(X C X^T + V)",
            gap,
        });
    }
    let y2 = y_norm * y_norm;
    Ok((y2 * r.pinv_quadratic(data.y()) + r.trace() - 2.0 * y2).max(0.0))
}

/// `J(theta; C, V) = ||y - X theta||^2_{V^+} + ||theta||^2_{C^+} + tr{R} / ||y||^2`
/// for `theta` in the constraint set of `(C, V)`.
pub fn cost_j(theta: &DVector<f64>, w: &WeightPair, data: &Dataset) -> Result<f64> {
    let y_norm = require_nonzero_y(data)?;
    check_dim("theta", data.d(), theta.len())?;
    let r = covariance(w, data)?;
    let residual = data.residual(theta);
    let theta_gap = w.c.range_gap(theta);
    if theta_gap > DEFAULT_FEASIBILITY_TOL {
        return Err(Error::Infeasible {
            check: "theta in R(C)",
            gap: theta_gap,
        });
    }
    let res_gap = w.v.range_gap(&residual);
    if res_gap > DEFAULT_FEASIBILITY_TOL {
        return Err(Error::Infeasible {
            check: "y - X theta in R(V)",
            gap: res_gap,
        });
    }
    Ok(w.v.pinv_quadratic(&residual) + w.c.pinv_quadratic(theta) + r.trace() / (y_norm * y_norm))
}

/// `f(x, Q; W) = ||x||^2_{Q^+} + tr{W Q} / ||y||^2`, or `+inf` when `x` is
/// not in the range of `Q`.
pub fn f_value(x: &DVector<f64>, q: &PsdMatrix, w: &PsdMatrix, y_norm: f64) -> Result<f64> {
    check_dim("f: weight Q", x.len(), q.dim())?;
    check_dim("f: matrix W", x.len(), w.dim())?;
    if q.range_gap(x) > DEFAULT_FEASIBILITY_TOL {
        return Ok(f64::INFINITY);
    }
    let trace_wq = (w.matrix().component_mul(q.matrix())).sum();
    Ok(q.pinv_quadratic(x) + trace_wq / (y_norm * y_norm))
}

fn check_h_args(x: &DVector<f64>, w: &PsdMatrix, y_norm: f64) -> Result<()> {
    check_dim("h: matrix W", x.len(), w.dim())?;
    if !(y_norm.is_finite() && y_norm > 0.0) {
        return Err(Error::InvalidInput(format!("||y|| must be positive, got {y_norm}")));
    }
    Ok(())
}

/// Infimum of `f(x, Q; W)` over `Q` in the structure family subject to
/// `x in R(Q)`:
///
/// * scaled identity: `(2 / ||y||) ||x||_2 sqrt(tr W)`
/// * diagonal: `(2 / ||y||) sum_i sqrt(w_ii) |x_i|`
/// * unstructured: `(2 / ||y||) ||x||_W`
pub fn h_value(x: &DVector<f64>, w: &PsdMatrix, s: CovStructure, y_norm: f64) -> Result<f64> {
    check_h_args(x, w, y_norm)?;
    let inner = match s {
        CovStructure::ScaledIdentity => x.norm() * w.trace().max(0.0).sqrt(),
        CovStructure::Diagonal => w
            .diagonal()
            .iter()
            .zip(x.iter())
            .map(|(wii, xi)| wii.max(0.0).sqrt() * xi.abs())
            .sum(),
        CovStructure::Unstructured => x.dot(&(w.matrix() * x)).max(0.0).sqrt(),
    };
    Ok(2.0 * inner / y_norm)
}

/// The weight in the structure family at which `f(x, . ; W)` reaches
/// [`h_value`].
///
/// Fails with [`Error::NotAttained`] when the infimum is approached only in
/// the limit: `x != 0` with `W x = 0` (or the analogous zero-weight
/// coordinate for the other families).
pub fn attaining_weight(x: &DVector<f64>, w: &PsdMatrix, s: CovStructure, y_norm: f64) -> Result<PsdMatrix> {
    check_h_args(x, w, y_norm)?;
    let m = x.len();
    let x_norm = x.norm();
    if x_norm == 0.0 {
        return Ok(PsdMatrix::zeros(m));
    }
    match s {
        CovStructure::ScaledIdentity => {
            let tr = w.trace();
            if tr <= 0.0 {
                return Err(Error::NotAttained("x != 0 with tr{W} = 0".into()));
            }
            PsdMatrix::scaled_identity(m, y_norm * x_norm / tr.sqrt())
        }
        CovStructure::Diagonal => {
            let diag = w.diagonal();
            let mut a = Vec::with_capacity(m);
            for (i, (&xi, &wii)) in x.iter().zip(diag.iter()).enumerate() {
                if xi == 0.0 {
                    a.push(0.0);
                } else if wii <= 0.0 {
                    return Err(Error::NotAttained(format!(
                        "x_{i} != 0 with zero diagonal weight w_{i}{i}"
                    )));
                } else {
                    a.push(y_norm * xi.abs() / wii.sqrt());
                }
            }
            PsdMatrix::from_diagonal(&a)
        }
        CovStructure::Unstructured => {
            let wx = w.matrix() * x;
            let w_norm = x.dot(&wx).max(0.0).sqrt();
            if wx.amax() <= DEFAULT_RANK_TOL * w.max_eigenvalue() * x.amax() || w_norm == 0.0 {
                return Err(Error::NotAttained("x != 0 with W x = 0".into()));
            }
            PsdMatrix::outer(x, y_norm / w_norm)
        }
    }
}

/// `G(theta) = h(y - X theta, I; S_V) + h(theta, X^T X; S_C)`.
pub fn g_value(theta: &DVector<f64>, s_c: CovStructure, s_v: CovStructure, data: &Dataset) -> Result<f64> {
    let y_norm = require_nonzero_y(data)?;
    check_dim("theta", data.d(), theta.len())?;
    let gram = PsdMatrix::new(data.gram())?;
    let noise = h_value(&data.residual(theta), &PsdMatrix::identity(data.n()), s_v, y_norm)?;
    let prior = h_value(theta, &gram, s_c, y_norm)?;
    Ok(noise + prior)
}

/// Shrinkage factor `q = min(1, ||y||_{I - X X^+} / (sqrt(n - 1) ||y||_{X X^+}))`,
/// with `q = 1` when `y` is orthogonal to the range of `X`.
pub fn shrinkage_q(data: &Dataset) -> Result<f64> {
    let n = data.n();
    if n < 2 {
        return Err(Error::InvalidInput("shrinkage factor needs n >= 2".into()));
    }
    let y_norm = require_nonzero_y(data)?;
    let x_pinv = general_pseudo_inverse(data.x(), DEFAULT_RANK_TOL);
    let fitted = data.x() * (x_pinv * data.y());
    let inside = fitted.norm();
    let outside = (data.y() - &fitted).norm();
    if inside <= DEFAULT_RANK_TOL * y_norm {
        return Ok(1.0);
    }
    Ok((outside / ((n - 1) as f64).sqrt() / inside).min(1.0))
}

/// Result of [`tuned_estimate`].
#[derive(Debug, Clone)]
pub struct TunedEstimate {
    /// `theta*` with `theta = theta*`, the recovered `(C, V)` in
    /// `weights_used`, and the tuned criterion value as `objective`.
    pub report: EstimateReport,
    pub criterion: Criterion,
    pub structure_c: CovStructure,
    pub structure_v: CovStructure,
    /// Present when an iterative solver produced `theta*`.
    pub solve: Option<SolveResult>,
    /// Shrinkage factor, for the unstructured-prior / scaled-identity-noise pair.
    pub shrinkage: Option<f64>,
    /// `theta(C, V)` recomputed from the recovered weights.
    pub reestimate: Option<DVector<f64>>,
    /// `|J - (fit / ||y||^2 + 2)| / (1 + |J|)` at the recovered weights.
    pub identity_residual: Option<f64>,
    /// `||theta(C, V) - theta*|| / max(||theta*||, 1e-8 ||y|| / ||X||_F)`.
    pub round_trip_gap: Option<f64>,
}

impl TunedEstimate {
    pub fn theta(&self) -> &DVector<f64> {
        &self.report.theta
    }

    pub fn weights(&self) -> &WeightPair {
        &self.report.weights_used
    }
}

/// Options for [`tuned_estimate`].
#[derive(Debug, Clone)]
pub struct TuneOptions {
    pub solver: SolverOptions,
    /// Replaces the tuned regularization parameter when set.
    pub lambda_override: Option<f64>,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::precise(),
            lambda_override: None,
        }
    }
}

/// The covariance-fitting estimate for the structure pair `(s_c, s_v)`.
///
/// Builds the tuned criterion, minimizes it, recovers `(C, V)` from the
/// minimizer with the attaining-weight formulas and checks that the
/// closed-form estimate at those weights reproduces the minimizer and that
/// the fitting identity holds. Check misses are reported as diagnostics.
pub fn tuned_estimate(s_c: CovStructure, s_v: CovStructure, data: &Dataset, opts: &TuneOptions) -> Result<TunedEstimate> {
    let mut criterion = tuned_criterion(s_c, s_v, data)?;
    let mut diagnostics = Vec::new();
    if let Some(lambda) = opts.lambda_override {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidInput(format!("lambda must be nonnegative, got {lambda}")));
        }
        diagnostics.push(Diagnostic::LambdaOverride {
            tuned: criterion.lambda,
            used: lambda,
        });
        criterion.lambda = lambda;
    }
    let (n, d) = (data.n(), data.d());
    let y_norm = data.y().norm();

    if y_norm == 0.0 {
        return Ok(TunedEstimate {
            report: EstimateReport {
                theta: DVector::zeros(d),
                residual_range_gap: 0.0,
                objective: 0.0,
                weights_used: WeightPair::new(PsdMatrix::zeros(d), PsdMatrix::zeros(n)),
                diagnostics,
            },
            criterion,
            structure_c: s_c,
            structure_v: s_v,
            solve: None,
            shrinkage: None,
            reestimate: Some(DVector::zeros(d)),
            identity_residual: None,
            round_trip_gap: Some(0.0),
        });
    }

    let (mut theta, solve_result, shrinkage) =
        if s_c == CovStructure::Unstructured && s_v == CovStructure::ScaledIdentity && opts.lambda_override.is_none() {
            let q = shrinkage_q(data)?;
            let ls = general_pseudo_inverse(data.x(), DEFAULT_RANK_TOL) * data.y();
            (ls * (1.0 - q), None, Some(q))
        } else {
            let result = solve(&criterion, data, &opts.solver)?;
            if !result.converged {
                return Err(Error::NotConverged {
                    iterations: result.iterations,
                    gap: result.certificate_gap,
                });
            }
            (result.theta.clone(), Some(result), None)
        };

    // Coordinates the prior weight cannot reach do not change G; drop them so
    // that the infimum over C is attained.
    let gram = PsdMatrix::new(data.gram())?;
    match s_c {
        CovStructure::Unstructured => {
            let x_theta = data.x() * &theta;
            if theta.norm() > 0.0 && x_theta.norm() <= DEFAULT_RANK_TOL * data.x().norm() * theta.norm() {
                theta.fill(0.0);
                diagnostics.push(Diagnostic::NullSpaceMinimizerReplaced);
            }
        }
        CovStructure::Diagonal => {
            for (j, col) in data.x().column_iter().enumerate() {
                if col.norm() == 0.0 {
                    theta[j] = 0.0;
                }
            }
        }
        CovStructure::ScaledIdentity => {
            if data.x().norm() == 0.0 {
                theta.fill(0.0);
            }
        }
    }

    let residual = data.residual(&theta);
    let c_hat = attaining_weight(&theta, &gram, s_c, y_norm)?;
    let v_hat = attaining_weight(&residual, &PsdMatrix::identity(n), s_v, y_norm)?;
    let weights = WeightPair::new(c_hat, v_hat);
    let objective = crate::solvers::criterion_value(&criterion, &theta, data)?;

    let r = covariance(&weights, data)?;
    let residual_range_gap = r.range_gap(data.y());

    let (reestimate, identity_residual, round_trip_gap) = match estimate_weighted(&weights, data) {
        Ok(est) => {
            let diff = (&est.theta - &theta).norm();
            // Relative to theta*, floored at a tiny multiple of the natural
            // scale ||y|| / ||X|| so a numerically zero theta* is not amplified.
            let x_norm = data.x().norm();
            let floor = if x_norm > 0.0 { ROUND_TRIP_FLOOR * y_norm / x_norm } else { 0.0 };
            let scale = theta.norm().max(floor);
            let gap = if scale > 0.0 { diff / scale } else { diff };
            if gap > ROUND_TRIP_TOL {
                diagnostics.push(Diagnostic::RoundTripMismatch { gap });
            }
            let identity = match (cost_j(&est.theta, &weights, data), spice_criterion(&weights, data)) {
                (Ok(j), Ok(fit)) => {
                    let res = (j - (fit / (y_norm * y_norm) + 2.0)).abs() / (1.0 + j.abs());
                    if res > IDENTITY_TOL {
                        diagnostics.push(Diagnostic::IdentityMismatch { residual: res });
                    }
                    Some(res)
                }
                _ => None,
            };
            diagnostics.extend(est.diagnostics);
            (Some(est.theta), identity, Some(gap))
        }
        Err(Error::Infeasible { gap, .. }) => {
            diagnostics.push(Diagnostic::RecoveredWeightsInfeasible { gap });
            (None, None, None)
        }
        Err(e) => return Err(e),
    };

    Ok(TunedEstimate {
        report: EstimateReport {
            theta,
            residual_range_gap,
            objective,
            weights_used: weights,
            diagnostics,
        },
        criterion,
        structure_c: s_c,
        structure_v: s_v,
        solve: solve_result,
        shrinkage,
        reestimate,
        identity_residual,
        round_trip_gap,
    })
}
