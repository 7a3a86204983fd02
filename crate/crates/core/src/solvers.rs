//! Minimizers for `fit(y - X theta) + lambda * penalty(theta)` where the fit
//! is `sqrt(MSPE)` or `MAD` and the penalty is `||theta||_2`, a weighted
//! `l1` norm or a weighted `l2` seminorm.
//!
//! All of these are sums of two norms composed with linear maps, so the
//! solver is over-relaxed ADMM on the splitting
//!
//! ```text
//! minimize F(z1) + (lambda / sigma) g(z2)   s.t.   z1 = y - X theta,  z2 = sigma D theta
//! ```
//!
//! with `F` the fit norm, `g` the penalty norm and `sigma` a fixed scale that
//! balances the two blocks. The theta-update is a least-squares solve against
//! the fixed matrix `X^T X + sigma^2 D^T D`, whose pseudoinverse is computed
//! once; the penalty parameter `rho` then adapts freely. Termination is on a
//! duality gap: the scaled ADMM multiplier is projected onto the dual
//! feasible set, giving a lower bound on the optimal value.

use nalgebra::{DMatrix, DVector, DVectorView, DVectorViewMut};

use crate::covfit::{Criterion, Fit, Penalty};
use crate::error::{check_dim, Error, Result};
use crate::estimators::Dataset;
use crate::linalg::{general_pseudo_inverse, least_squares_min_norm, PsdMatrix};

/// Checks before the first attempt to polish the current point. Later
/// attempts are spaced geometrically.
const POLISH_EVERY: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop once the duality gap is at most `objective_tol * (1 + |objective|)`.
    pub objective_tol: f64,
    /// Initial ADMM penalty. `None` picks `1 / (sqrt(n) ||y||)`.
    pub rho: Option<f64>,
    /// Over-relaxation factor in `(0, 2)`.
    pub relaxation: f64,
    /// Iterations between certificate evaluations and `rho` updates.
    pub check_every: usize,
    /// Anderson acceleration history length; 0 disables acceleration.
    pub anderson_memory: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 20_000,
            objective_tol: 1e-9,
            rho: None,
            relaxation: 1.6,
            check_every: 10,
            anderson_memory: 8,
        }
    }
}

impl SolverOptions {
    /// Settings for callers that need the minimizer itself to high accuracy,
    /// such as the weight recovery in covariance fitting.
    pub fn precise() -> Self {
        Self {
            max_iterations: 200_000,
            objective_tol: 1e-13,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput("max_iterations must be at least 1".into()));
        }
        if !(self.objective_tol.is_finite() && self.objective_tol > 0.0) {
            return Err(Error::InvalidInput(format!(
                "objective_tol must be positive, got {}",
                self.objective_tol
            )));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(Error::InvalidInput(format!(
                "relaxation must lie in (0, 2), got {}",
                self.relaxation
            )));
        }
        if let Some(rho) = self.rho {
            if !(rho.is_finite() && rho > 0.0) {
                return Err(Error::InvalidInput(format!("rho must be positive, got {rho}")));
            }
        }
        if self.check_every == 0 {
            return Err(Error::InvalidInput("check_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// One certificate evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub iteration: usize,
    /// Best primal objective seen at this check.
    pub objective: f64,
    /// Primal objective minus the dual lower bound.
    pub gap: f64,
    pub rho: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub theta: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Upper bound on `objective - optimal value`.
    pub certificate_gap: f64,
    pub trace: Vec<TracePoint>,
}

/// Exact value of the criterion at `theta`.
pub fn criterion_value(c: &Criterion, theta: &DVector<f64>, data: &Dataset) -> Result<f64> {
    check_dim("theta", data.d(), theta.len())?;
    let residual = data.residual(theta);
    let n = data.n() as f64;
    let fit = match c.fit {
        Fit::SqrtMspe => residual.norm() / n.sqrt(),
        Fit::Mad => residual.lp_norm(1) / n,
    };
    Ok(fit + c.lambda * c.penalty.value(theta))
}

fn validate_criterion(c: &Criterion, d: usize) -> Result<()> {
    if !(c.lambda.is_finite() && c.lambda >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "lambda must be finite and nonnegative, got {}",
            c.lambda
        )));
    }
    match &c.penalty {
        Penalty::L2 => Ok(()),
        Penalty::WeightedL1(w) => {
            check_dim("penalty weights", d, w.len())?;
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidInput("penalty weights must be finite and nonnegative".into()));
            }
            Ok(())
        }
        Penalty::WeightedL2Seminorm(m) => check_dim("penalty matrix", d, m.dim()),
    }
}

/// Global minimizer of the criterion.
///
/// A run that exhausts `max_iterations` is returned with `converged = false`.
pub fn solve(c: &Criterion, data: &Dataset, opts: &SolverOptions) -> Result<SolveResult> {
    validate_criterion(c, data.d())?;
    opts.validate()?;
    let penalty = (c.lambda > 0.0).then_some(&c.penalty);
    let admm = Admm::new(data.x(), c.fit, penalty)?;
    let mut state = admm.cold_state(data.y(), opts);
    Ok(admm.run(data.y(), c.lambda, opts, &mut state))
}

/// Minimizers of `fit + lambda * penalty` for every `lambda` in `lambdas`,
/// with `c.lambda` ignored. Each solve is warm-started from the previous one,
/// so an ordered grid (largest first) is the cheap direction.
pub fn solve_path(c: &Criterion, lambdas: &[f64], data: &Dataset, opts: &SolverOptions) -> Result<Vec<SolveResult>> {
    for &lambda in lambdas {
        validate_criterion(&Criterion::new(c.fit, c.penalty.clone(), lambda), data.d())?;
    }
    opts.validate()?;
    let path = PathSolver::new(data.x(), c.fit, &c.penalty)?;
    Ok(path.solve(data.y(), lambdas, opts))
}

/// Solvers for one design and criterion shape, shared across responses.
#[derive(Debug, Clone)]
pub(crate) struct PathSolver {
    penalized: Admm,
    unpenalized: Admm,
}

impl PathSolver {
    pub(crate) fn new(x: &DMatrix<f64>, fit: Fit, penalty: &Penalty) -> Result<Self> {
        Ok(Self {
            penalized: Admm::new(x, fit, Some(penalty))?,
            unpenalized: Admm::new(x, fit, None)?,
        })
    }

    /// Results in the order of `lambdas`.
    pub(crate) fn solve(&self, y: &DVector<f64>, lambdas: &[f64], opts: &SolverOptions) -> Vec<SolveResult> {
        let mut state = self.penalized.cold_state(y, opts);
        lambdas
            .iter()
            .map(|&lambda| {
                if lambda > 0.0 {
                    self.penalized.run(y, lambda, opts, &mut state)
                } else {
                    let mut cold = self.unpenalized.cold_state(y, opts);
                    self.unpenalized.run(y, 0.0, opts, &mut cold)
                }
            })
            .collect()
    }
}

/// Least absolute deviation: `MAD` with no penalty.
pub fn lad(data: &Dataset, opts: &SolverOptions) -> Result<SolveResult> {
    solve(&Criterion::new(Fit::Mad, Penalty::L2, 0.0), data, opts)
}

/// Least squares through the `sqrt(MSPE)` fit with no penalty.
pub fn least_squares(data: &Dataset, opts: &SolverOptions) -> Result<SolveResult> {
    solve(&Criterion::new(Fit::SqrtMspe, Penalty::L2, 0.0), data, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockNorm {
    L1,
    L2,
}

impl BlockNorm {
    fn dual_norm(self, v: &[f64]) -> f64 {
        match self {
            BlockNorm::L1 => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            BlockNorm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    /// In-place proximal map of `t * norm`.
    fn prox(self, v: &mut [f64], t: f64) {
        match self {
            BlockNorm::L1 => v.iter_mut().for_each(|x| *x = x.signum() * (x.abs() - t).max(0.0)),
            BlockNorm::L2 => {
                let norm = self.dual_norm(v);
                let shrink = if norm <= t { 0.0 } else { 1.0 - t / norm };
                v.iter_mut().for_each(|x| *x *= shrink);
            }
        }
    }
}

/// The scaled penalty map `sigma D`.
#[derive(Debug, Clone)]
enum PenaltyMap {
    None,
    /// Row `k` is `scale[k] * e_{index[k]}^T`.
    Coordinates { index: Vec<usize>, scale: Vec<f64> },
    Dense(DMatrix<f64>),
}

impl PenaltyMap {
    fn rows(&self) -> usize {
        match self {
            PenaltyMap::None => 0,
            PenaltyMap::Coordinates { index, .. } => index.len(),
            PenaltyMap::Dense(m) => m.nrows(),
        }
    }

    fn apply_into(&self, theta: &DVector<f64>, out: &mut [f64]) {
        match self {
            PenaltyMap::None => {}
            PenaltyMap::Coordinates { index, scale } => {
                for ((o, &j), s) in out.iter_mut().zip(index).zip(scale) {
                    *o = s * theta[j];
                }
            }
            PenaltyMap::Dense(m) => {
                let mut view = DVectorViewMut::from_slice(out, m.nrows());
                view.gemv(1.0, m, theta, 0.0);
            }
        }
    }

    fn apply(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.rows());
        self.apply_into(theta, out.as_mut_slice());
        out
    }

    /// `out += (sigma D)^T v`
    fn add_transpose(&self, v: &[f64], out: &mut DVector<f64>) {
        match self {
            PenaltyMap::None => {}
            PenaltyMap::Coordinates { index, scale } => {
                for ((&j, s), vk) in index.iter().zip(scale).zip(v) {
                    out[j] += s * vk;
                }
            }
            PenaltyMap::Dense(m) => out.gemv_tr(1.0, m, &DVectorView::from_slice(v, m.nrows()), 1.0),
        }
    }

    fn frobenius_sq(&self) -> f64 {
        match self {
            PenaltyMap::None => 0.0,
            PenaltyMap::Coordinates { scale, .. } => scale.iter().map(|s| s * s).sum(),
            PenaltyMap::Dense(m) => m.norm_squared(),
        }
    }

    fn scale_by(&mut self, sigma: f64) {
        match self {
            PenaltyMap::None => {}
            PenaltyMap::Coordinates { scale, .. } => scale.iter_mut().for_each(|s| *s *= sigma),
            PenaltyMap::Dense(m) => *m *= sigma,
        }
    }

    fn gram(&self, d: usize) -> DMatrix<f64> {
        match self {
            PenaltyMap::None => DMatrix::zeros(d, d),
            PenaltyMap::Coordinates { index, scale } => {
                let mut g = DMatrix::zeros(d, d);
                for (&j, s) in index.iter().zip(scale) {
                    g[(j, j)] += s * s;
                }
                g
            }
            PenaltyMap::Dense(m) => m.tr_mul(m),
        }
    }
}

/// ADMM iterate `(z1, z2, u1, u2)` stored contiguously, carried between
/// solves that share a design matrix.
#[derive(Debug, Clone)]
pub(crate) struct AdmmState {
    x: DVector<f64>,
    n: usize,
    m: usize,
    rho: f64,
}

/// Block views of a packed iterate.
struct Blocks<'a> {
    z1: &'a [f64],
    z2: &'a [f64],
    u1: &'a [f64],
    u2: &'a [f64],
}

fn blocks(x: &[f64], n: usize, m: usize) -> Blocks<'_> {
    let (z1, rest) = x.split_at(n);
    let (z2, rest) = rest.split_at(m);
    let (u1, u2) = rest.split_at(n);
    Blocks { z1, z2, u1, u2 }
}

/// Scratch vectors for one ADMM pass.
#[derive(Debug)]
struct Workspace {
    q1: DVector<f64>,
    q2: Vec<f64>,
    rhs: DVector<f64>,
    theta: DVector<f64>,
    a1: DVector<f64>,
    a2: DVector<f64>,
}

impl Workspace {
    fn new(n: usize, d: usize, m: usize) -> Self {
        Self {
            q1: DVector::zeros(n),
            q2: vec![0.0; m],
            rhs: DVector::zeros(d),
            theta: DVector::zeros(d),
            a1: DVector::zeros(n),
            a2: DVector::zeros(m),
        }
    }
}

/// Orthonormal basis of the span of a growing set of rows.
#[derive(Debug, Clone, Default)]
struct RowBasis {
    q: Vec<DVector<f64>>,
}

impl RowBasis {
    /// Adds `row` by Gram-Schmidt, twice for stability. Rows already in the
    /// span add nothing.
    fn add(&mut self, row: DVector<f64>) {
        let scale = row.norm();
        if scale == 0.0 {
            return;
        }
        let v = self.project_out(&self.project_out(&row));
        let norm = v.norm();
        if norm > 1e-10 * scale {
            self.q.push(v / norm);
        }
    }

    /// Component of `v` orthogonal to the span.
    fn project_out(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for q in &self.q {
            let c = q.dot(&out);
            out.axpy(-c, q, 1.0);
        }
        out
    }
}

/// Guessed active set: residuals fitted exactly and coefficients held at zero.
#[derive(Debug, Clone)]
struct Structure {
    zero_resid: Vec<usize>,
    pinned: Vec<bool>,
}

/// ADMM set up for one design matrix and criterion shape. Reusable across
/// responses and regularization parameters.
#[derive(Debug, Clone)]
pub(crate) struct Admm {
    x: DMatrix<f64>,
    fit: Fit,
    norm: BlockNorm,
    map: PenaltyMap,
    /// The original penalty, for exact objective evaluation.
    penalty: Option<Penalty>,
    sigma: f64,
    h_pinv: DMatrix<f64>,
    /// `z2 / scale` recovers every coordinate of theta.
    invertible_map: bool,
    /// `((sigma D)^T)^+` for dense maps, used to derive dual penalty blocks.
    map_pinv_t: Option<DMatrix<f64>>,
}

impl Admm {
    pub(crate) fn new(x: &DMatrix<f64>, fit: Fit, penalty: Option<&Penalty>) -> Result<Self> {
        let d = x.ncols();
        let (mut map, norm) = match penalty {
            None => (PenaltyMap::None, BlockNorm::L2),
            Some(Penalty::L2) => (
                PenaltyMap::Coordinates {
                    index: (0..d).collect(),
                    scale: vec![1.0; d],
                },
                BlockNorm::L2,
            ),
            Some(Penalty::WeightedL1(w)) => {
                check_dim("penalty weights", d, w.len())?;
                let index: Vec<usize> = (0..d).filter(|&j| w[j] > 0.0).collect();
                let scale = index.iter().map(|&j| w[j]).collect();
                (PenaltyMap::Coordinates { index, scale }, BlockNorm::L1)
            }
            Some(Penalty::WeightedL2Seminorm(m)) => {
                check_dim("penalty matrix", d, m.dim())?;
                let f = m.spectral_factor();
                let mut rows = f.basis.transpose();
                for (mut row, l) in rows.row_iter_mut().zip(f.eigenvalues.iter()) {
                    row *= l.sqrt();
                }
                (PenaltyMap::Dense(rows), BlockNorm::L2)
            }
        };
        let map_norm = map.frobenius_sq();
        let sigma = if map_norm > 0.0 && x.norm_squared() > 0.0 {
            (x.norm_squared() / map_norm).sqrt()
        } else {
            1.0
        };
        map.scale_by(sigma);
        let h = x.tr_mul(x) + map.gram(d);
        let h_pinv = PsdMatrix::new((&h + h.transpose()) * 0.5)?.pseudo_inverse().into_matrix();
        let invertible_map = matches!(&map, PenaltyMap::Coordinates { index, .. } if index.len() == d);
        let map_pinv_t = match &map {
            PenaltyMap::Dense(m) => Some(general_pseudo_inverse(&m.transpose(), 1e-12)),
            _ => None,
        };
        Ok(Self {
            x: x.clone(),
            fit,
            norm,
            map,
            penalty: penalty.cloned(),
            sigma,
            h_pinv,
            invertible_map,
            map_pinv_t,
        })
    }

    pub(crate) fn has_penalty(&self) -> bool {
        self.map.rows() > 0
    }

    pub(crate) fn cold_state(&self, y: &DVector<f64>, opts: &SolverOptions) -> AdmmState {
        let n = self.x.nrows();
        let m = self.map.rows();
        let mut x = DVector::zeros(2 * (n + m));
        x.rows_mut(0, n).copy_from(y);
        AdmmState {
            x,
            n,
            m,
            rho: self.initial_rho(y, opts),
        }
    }

    /// The configured penalty parameter, or one matched to the scale of `y`.
    fn initial_rho(&self, y: &DVector<f64>, opts: &SolverOptions) -> f64 {
        let y_norm = y.norm().max(f64::MIN_POSITIVE);
        opts.rho.unwrap_or(1.0 / ((self.x.nrows() as f64).sqrt() * y_norm))
    }

    fn fit_norm(&self) -> BlockNorm {
        match self.fit {
            Fit::SqrtMspe => BlockNorm::L2,
            Fit::Mad => BlockNorm::L1,
        }
    }

    /// `F(r)`, the fit term as a function of the residual.
    fn fit_value(&self, r: &DVector<f64>) -> f64 {
        let n = self.x.nrows() as f64;
        match self.fit {
            Fit::SqrtMspe => r.norm() / n.sqrt(),
            Fit::Mad => r.lp_norm(1) / n,
        }
    }

    /// Radius of the dual ball of `F`.
    fn fit_dual_radius(&self) -> f64 {
        let n = self.x.nrows() as f64;
        match self.fit {
            Fit::SqrtMspe => 1.0 / n.sqrt(),
            Fit::Mad => 1.0 / n,
        }
    }

    fn objective(&self, theta: &DVector<f64>, residual: &DVector<f64>, lambda: f64) -> f64 {
        let penalty = match &self.penalty {
            Some(p) if lambda > 0.0 => lambda * p.value(theta),
            _ => 0.0,
        };
        self.fit_value(residual) + penalty
    }

    /// `A^T (w1, w2) = -X^T w1 + (sigma D)^T w2`
    fn a_transpose(&self, w1: &[f64], w2: &[f64]) -> DVector<f64> {
        let mut out = -self.x.tr_mul(&DVectorView::from_slice(w1, w1.len()));
        self.map.add_transpose(w2, &mut out);
        out
    }

    /// One over-relaxed ADMM pass from the packed iterate `x` into `out`.
    /// Leaves the theta-iterate and its images `y - X theta`, `sigma D theta`
    /// in the workspace.
    #[allow(clippy::too_many_arguments)]
    fn step(&self, y: &DVector<f64>, penalty_weight: f64, alpha: f64, rho: f64, x: &[f64], out: &mut [f64], ws: &mut Workspace) {
        let n = self.x.nrows();
        let m = self.map.rows();
        let b = blocks(x, n, m);
        for (((q, yi), z), u) in ws.q1.iter_mut().zip(y.iter()).zip(b.z1).zip(b.u1) {
            *q = yi - z + u;
        }
        ws.rhs.gemv_tr(1.0, &self.x, &ws.q1, 0.0);
        for ((q, z), u) in ws.q2.iter_mut().zip(b.z2).zip(b.u2) {
            *q = z - u;
        }
        self.map.add_transpose(&ws.q2, &mut ws.rhs);
        ws.theta.gemv(1.0, &self.h_pinv, &ws.rhs, 0.0);
        ws.a1.copy_from(y);
        ws.a1.gemv(-1.0, &self.x, &ws.theta, 1.0);
        self.map.apply_into(&ws.theta, ws.a2.as_mut_slice());

        let (z1, rest) = out.split_at_mut(n);
        let (z2, rest) = rest.split_at_mut(m);
        let (u1, u2) = rest.split_at_mut(n);
        for i in 0..n {
            let v = alpha * ws.a1[i] + (1.0 - alpha) * b.z1[i] + b.u1[i];
            z1[i] = v;
            u1[i] = v;
        }
        for k in 0..m {
            let v = alpha * ws.a2[k] + (1.0 - alpha) * b.z2[k] + b.u2[k];
            z2[k] = v;
            u2[k] = v;
        }
        self.fit_norm().prox(z1, self.fit_dual_radius() / rho);
        self.norm.prox(z2, penalty_weight / rho);
        u1.iter_mut().zip(z1.iter()).for_each(|(u, z)| *u -= z);
        u2.iter_mut().zip(z2.iter()).for_each(|(u, z)| *u -= z);
    }

    /// Lower bound on the optimal value from the multiplier `rho * u`.
    ///
    /// Two dual-feasible points are built and the better one is kept. The
    /// first projects the multiplier onto `null(A^T)` and scales it into the
    /// dual norm balls. The second, when `sigma D` is invertible, projects
    /// only the fit block onto its ball and derives the penalty block from
    /// it exactly, which wastes much less near a solution.
    fn dual_bound(&self, y: &DVector<f64>, penalty_weight: f64, state: &AdmmState) -> f64 {
        let b = blocks(state.x.as_slice(), state.n, state.m);
        let w1 = DVector::from_column_slice(b.u1) * state.rho;
        let w2 = DVector::from_column_slice(b.u2) * state.rho;
        self.bound_from(y, penalty_weight, w1, w2)
    }

    /// Lower bound from an arbitrary (possibly infeasible) dual guess.
    fn bound_from(&self, y: &DVector<f64>, penalty_weight: f64, w1: DVector<f64>, w2: DVector<f64>) -> f64 {
        let fit_norm = self.fit_norm();
        let fit_radius = self.fit_dual_radius();

        let c = &self.h_pinv * self.a_transpose(w1.as_slice(), w2.as_slice());
        let w1p = &w1 + &self.x * &c;
        let w2p = &w2 - self.map.apply(&c);
        let mut s = 1.0_f64;
        let n1 = fit_norm.dual_norm(w1p.as_slice());
        if n1 > fit_radius {
            s = s.min(fit_radius / n1);
        }
        if self.has_penalty() {
            let n2 = self.norm.dual_norm(w2p.as_slice());
            if n2 > penalty_weight {
                s = s.min(penalty_weight / n2);
            }
        }
        let projected = s * w1p.dot(y);

        let derived = match (&self.map, self.invertible_map) {
            (PenaltyMap::Coordinates { index, scale }, true) => {
                let mut v1 = w1;
                match fit_norm {
                    BlockNorm::L1 => v1.apply(|x| *x = x.clamp(-fit_radius, fit_radius)),
                    BlockNorm::L2 => {
                        let norm = v1.norm();
                        if norm > fit_radius {
                            v1 *= fit_radius / norm;
                        }
                    }
                }
                let xt = self.x.tr_mul(&v1);
                let v2: Vec<f64> = index.iter().zip(scale).map(|(&j, s)| xt[j] / s).collect();
                let n2 = self.norm.dual_norm(&v2);
                let s = if n2 > penalty_weight { penalty_weight / n2 } else { 1.0 };
                s * v1.dot(y)
            }
            _ => f64::NEG_INFINITY,
        };
        projected.max(derived)
    }


    /// Active structure guessed from thresholds at `theta`: residuals and
    /// coefficients at most `tau` relative to their largest entry.
    fn threshold_structure(&self, y: &DVector<f64>, theta: &DVector<f64>, tau: f64) -> Structure {
        let r = y - &self.x * theta;
        let zero_resid = match self.fit {
            Fit::SqrtMspe if r.norm() <= tau * y.norm() => (0..r.len()).collect(),
            Fit::SqrtMspe => Vec::new(),
            Fit::Mad => {
                let cut = tau * y.amax();
                (0..r.len()).filter(|&i| r[i].abs() <= cut).collect()
            }
        };
        let cut = tau * theta.amax();
        let pinned = match &self.penalty {
            Some(Penalty::WeightedL1(w)) => (0..theta.len()).map(|j| w[j] > 0.0 && theta[j].abs() <= cut).collect(),
            _ => vec![(&self.x * theta).norm() <= tau * y.norm(); theta.len()],
        };
        Structure { zero_resid, pinned }
    }

    /// Active structure read off the exact zeros the proximal steps leave
    /// in the split variables.
    fn split_structure(&self, state: &AdmmState) -> Structure {
        let b = blocks(state.x.as_slice(), state.n, state.m);
        let zero_resid = match self.fit {
            Fit::SqrtMspe if b.z1.iter().all(|&z| z == 0.0) => (0..state.n).collect(),
            Fit::SqrtMspe => Vec::new(),
            Fit::Mad => (0..state.n).filter(|&i| b.z1[i] == 0.0).collect(),
        };
        let d = self.x.ncols();
        let pinned = match &self.map {
            PenaltyMap::Coordinates { index, .. } if self.norm == BlockNorm::L1 => {
                let mut p = vec![false; d];
                for (&j, &z) in index.iter().zip(b.z2) {
                    p[j] = z == 0.0;
                }
                p
            }
            PenaltyMap::None => vec![false; d],
            _ => vec![b.z2.iter().all(|&z| z == 0.0); d],
        };
        Structure { zero_resid, pinned }
    }

    /// Whether the objective is piecewise linear, so that [`Admm::descend`]
    /// applies.
    fn piecewise_linear(&self, lambda: f64) -> bool {
        self.fit == Fit::Mad && (lambda == 0.0 || !matches!(&self.penalty, Some(Penalty::L2 | Penalty::WeightedL2Seminorm(_))))
    }

    /// Whether the penalty is linear on a fixed sign pattern, so that
    /// [`Admm::sqrt_fit_refine`] applies.
    fn linear_on_orthants(&self, lambda: f64) -> bool {
        lambda == 0.0 || !matches!(&self.penalty, Some(Penalty::L2 | Penalty::WeightedL2Seminorm(_)))
    }

    /// Candidate zero sets for the square-root fit with a weighted `l1`
    /// penalty, read off the optimality conditions at `theta`: coordinates
    /// ranked by `|x_j^T w1| / (lambda w_j)` with `w1 = r / (sqrt(n) ||r||)`,
    /// the lowest `k` pinned for a few `k`. Zero coordinates of an optimum
    /// have ratio at most one, nonzero ones exactly one.
    fn dual_pinned(&self, y: &DVector<f64>, lambda: f64, theta: &DVector<f64>) -> Vec<Vec<bool>> {
        let Some(Penalty::WeightedL1(w)) = &self.penalty else { return Vec::new() };
        let r = y - &self.x * theta;
        let rn = r.norm();
        if rn == 0.0 || lambda == 0.0 {
            return Vec::new();
        }
        let xt = self.x.tr_mul(&r) * (self.fit_dual_radius() / rn);
        let mut ranked: Vec<(usize, f64)> =
            (0..w.len()).filter(|&j| w[j] > 0.0).map(|j| (j, xt[j].abs() / (lambda * w[j]))).collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut counts: Vec<usize> = [1e-2, 1e-4, 1e-6]
            .iter()
            .map(|m| ranked.iter().filter(|(_, ratio)| *ratio < 1.0 - m).count())
            .collect();
        let base = counts[0];
        counts.extend([base + 1, base + 2, base + 3]);
        counts.sort_unstable();
        counts.dedup();
        counts
            .into_iter()
            .filter(|&k| k > 0 && k <= ranked.len())
            .map(|k| {
                let mut p = vec![false; w.len()];
                ranked[..k].iter().for_each(|&(j, _)| p[j] = true);
                p
            })
            .collect()
    }

    /// Exact minimizer of the square-root fit plus a penalty that is linear
    /// on the sign pattern of `theta`, over the coordinates not pinned at
    /// zero. On a support `F` with linear term `c`, and `G = X_F^T X_F`,
    /// `theta_F = theta_LS - t G^-1 c` with `t = sqrt(n) ||r_LS|| / sqrt(1 - n c^T G^-1 c)`.
    /// Coordinates whose sign flips are pinned and the solve repeated.
    fn sqrt_fit_refine(&self, y: &DVector<f64>, lambda: f64, theta: &DVector<f64>, pinned: &[bool]) -> Option<DVector<f64>> {
        let (n, d) = self.x.shape();
        let weights = match (&self.penalty, lambda > 0.0) {
            (Some(Penalty::WeightedL1(w)), true) => w * lambda,
            _ => DVector::zeros(d),
        };
        let mut sign: Vec<f64> = (0..d).map(|j| if pinned[j] && weights[j] > 0.0 { 0.0 } else { theta[j].signum() }).collect();
        for _ in 0..d {
            let free: Vec<usize> = (0..d).filter(|&j| weights[j] == 0.0 || sign[j] != 0.0).collect();
            let mut out = DVector::zeros(d);
            if free.is_empty() {
                return Some(out);
            }
            // With as many free coordinates as rows the fit interpolates and
            // the stationarity conditions above do not apply.
            if free.len() >= n {
                return None;
            }
            // Through a QR factorization: the normal equations lose too much
            // accuracy for the near-cancellation in `1 - n c^T G^-1 c`.
            let xf = self.x.select_columns(&free);
            let qr = xf.clone().qr();
            let r = qr.r();
            let theta_ls = r.solve_upper_triangular(&qr.q().tr_mul(y))?;
            let r_ls = (y - &xf * &theta_ls).norm();
            let c = DVector::from_iterator(free.len(), free.iter().map(|&j| weights[j] * sign[j]));
            let g_pinv_c = r.solve_upper_triangular(&r.transpose().solve_lower_triangular(&c)?)?;
            let q = c.dot(&g_pinv_c) * n as f64;
            if q >= 1.0 {
                return None;
            }
            let t = (n as f64).sqrt() * r_ls / (1.0 - q).sqrt();
            let theta_f = theta_ls - g_pinv_c * t;
            let mut flipped = false;
            for (k, &j) in free.iter().enumerate() {
                out[j] = theta_f[k];
                if weights[j] > 0.0 && theta_f[k] * sign[j] <= 0.0 {
                    sign[j] = 0.0;
                    flipped = true;
                }
            }
            if !flipped {
                return Some(out);
            }
        }
        None
    }

    /// Exact descent on a piecewise-linear objective from a point of the
    /// guessed face. Steps along the projected negative gradient to the
    /// minimizing breakpoint and makes the constraint met there active. Where
    /// the face is stationary, the active constraint whose multiplier leaves
    /// its bound the most is released. Stops at a point whose multipliers
    /// are all feasible, or when no strict descent is found.
    fn descend(&self, y: &DVector<f64>, lambda: f64, theta: DVector<f64>, mut st: Structure) -> (DVector<f64>, Structure) {
        let (n, d) = self.x.shape();
        let weights = match (&self.penalty, lambda > 0.0) {
            (Some(Penalty::WeightedL1(w)), true) => w * lambda,
            _ => DVector::zeros(d),
        };
        let fit_bound = self.fit_dual_radius();
        let mut theta = theta;
        let mut basis = RowBasis::default();
        let mut included = vec![false; n + d];
        for _ in 0..4 * (n + d) {
            let pinned: Vec<usize> = (0..d).filter(|&j| st.pinned[j]).collect();
            let mut in_z = vec![false; n];
            st.zero_resid.iter().for_each(|&i| in_z[i] = true);
            let r = y - &self.x * &theta;
            let signs = DVector::from_iterator(n, (0..n).map(|i| if in_z[i] { 0.0 } else { r[i].signum() }));
            let mut grad = -self.x.tr_mul(&signs) * fit_bound;
            for j in 0..d {
                if !st.pinned[j] && theta[j] != 0.0 {
                    grad[j] += weights[j] * theta[j].signum();
                }
            }

            // Active constraint rows: `x_i theta = y_i` and `theta_j = 0`.
            let k = st.zero_resid.len() + pinned.len();
            let row_of = |idx: usize| -> DVector<f64> {
                if idx < st.zero_resid.len() {
                    self.x.row(st.zero_resid[idx]).transpose()
                } else {
                    let mut e = DVector::zeros(d);
                    e[pinned[idx - st.zero_resid.len()]] = 1.0;
                    e
                }
            };
            let keys: Vec<usize> = st.zero_resid.iter().copied().chain(pinned.iter().map(|&j| n + j)).collect();
            for (idx, &key) in keys.iter().enumerate() {
                if !included[key] {
                    included[key] = true;
                    basis.add(row_of(idx));
                }
            }

            let mut dir = -basis.project_out(&grad);
            let scale = 1.0 + grad.norm();
            if dir.norm() <= 1e-12 * scale {
                // Stationary on the face: grad = rows^T c. Release the most
                // violated constraint, if any.
                let mut rows_t = DMatrix::zeros(d, k);
                for idx in 0..k {
                    rows_t.set_column(idx, &row_of(idx));
                }
                let c = least_squares_min_norm(&rows_t, &grad, 1e-12);
                let bound_of = |idx: usize| if idx < st.zero_resid.len() { fit_bound } else { weights[pinned[idx - st.zero_resid.len()]] };
                let mut violated: Vec<(usize, f64)> = (0..k)
                    .map(|idx| (idx, c[idx].abs() / bound_of(idx).max(f64::MIN_POSITIVE)))
                    .filter(|&(_, ratio)| ratio > 1.0 + 1e-9)
                    .collect();
                if violated.is_empty() {
                    break;
                }
                violated.sort_by(|a, b| b.1.total_cmp(&a.1));
                let mut found = None;
                for &(idx, _) in violated.iter().take(4) {
                    let coef = bound_of(idx);
                    let row = row_of(idx);
                    let mut keep = RowBasis::default();
                    (0..k).filter(|&other| other != idx).for_each(|other| keep.add(row_of(other)));
                    // The released term contributes `coef * |row . v|`; try
                    // both signs of `row . v`.
                    for s in [1.0, -1.0] {
                        let v = -keep.project_out(&(&grad + &row * (s * coef)));
                        let rv = row.dot(&v);
                        if rv * s > 0.0 && grad.dot(&v) + coef * rv.abs() < -1e-14 * scale * v.norm() {
                            found = Some((idx, v, keep));
                            break;
                        }
                    }
                    if found.is_some() {
                        break;
                    }
                }
                let Some((idx, v, keep)) = found else { break };
                included[keys[idx]] = false;
                basis = keep;
                if idx < st.zero_resid.len() {
                    st.zero_resid.remove(idx);
                } else {
                    st.pinned[pinned[idx - st.zero_resid.len()]] = false;
                }
                dir = v;
            }

            // Breakpoints where a residual or a coefficient crosses zero.
            let mut in_z = vec![false; n];
            st.zero_resid.iter().for_each(|&i| in_z[i] = true);
            let xd = &self.x * &dir;
            let mut breaks: Vec<f64> = (0..n)
                .filter(|&i| !in_z[i] && xd[i] != 0.0)
                .map(|i| r[i] / xd[i])
                .chain((0..d).filter(|&j| !st.pinned[j] && dir[j] != 0.0).map(|j| -theta[j] / dir[j]))
                .filter(|&t| t > 0.0)
                .collect();
            breaks.sort_by(f64::total_cmp);
            let eval = |t: f64| {
                let th = &theta + &dir * t;
                self.objective(&th, &(y - &self.x * &th), lambda)
            };
            let mut best = (0.0, eval(0.0));
            for &t in &breaks {
                let v = eval(t);
                if v > best.1 {
                    break;
                }
                best = (t, v);
            }
            if best.0 == 0.0 {
                break;
            }
            theta += &dir * best.0;
            let r = y - &self.x * &theta;
            let cut_r = 1e-12 * (1.0 + y.amax());
            let cut_t = 1e-12 * (1.0 + theta.amax());
            st.zero_resid = (0..n).filter(|&i| in_z[i] || r[i].abs() <= cut_r).collect();
            for j in 0..d {
                if weights[j] > 0.0 && (st.pinned[j] || theta[j].abs() <= cut_t) {
                    st.pinned[j] = true;
                    theta[j] = 0.0;
                }
            }
        }
        (theta, st)
    }

    /// Projects `theta` onto the affine set of the guessed structure and
    /// solves the stationarity conditions for the free dual entries. Signs
    /// come from `theta`. Returns the projected point, if it differs, and the
    /// resulting lower bound.
    fn polish(&self, y: &DVector<f64>, lambda: f64, penalty_weight: f64, theta: &DVector<f64>, st: &Structure) -> (Option<DVector<f64>>, f64) {
        let (n, d) = self.x.shape();
        let r = y - &self.x * theta;
        let radius = self.fit_dual_radius();
        let zero_resid = &st.zero_resid;
        let mut w1 = DVector::zeros(n);
        match self.fit {
            Fit::SqrtMspe => {
                if zero_resid.is_empty() {
                    let rn = r.norm();
                    if rn > 0.0 {
                        w1 = &r * (radius / rn);
                    }
                }
            }
            Fit::Mad => {
                let mut in_z = vec![false; n];
                zero_resid.iter().for_each(|&i| in_z[i] = true);
                for i in 0..n {
                    if !in_z[i] {
                        w1[i] = r[i].signum() * radius;
                    }
                }
            }
        }

        // Stationarity rows `eq` with right-hand sides `target`, and the
        // coordinates pinned at zero.
        let mut eq = Vec::new();
        let mut target = Vec::new();
        let pinned = &st.pinned;
        match (&self.penalty, lambda > 0.0) {
            (Some(Penalty::WeightedL1(w)), true) => {
                for j in 0..d {
                    if w[j] == 0.0 {
                        eq.push(j);
                        target.push(0.0);
                    } else if !pinned[j] && theta[j] != 0.0 {
                        eq.push(j);
                        target.push(lambda * w[j] * theta[j].signum());
                    }
                }
            }
            (Some(p @ (Penalty::L2 | Penalty::WeightedL2Seminorm(_))), true) => {
                let (value, grad) = match p {
                    Penalty::WeightedL2Seminorm(m) => (p.value(theta), m.matrix() * theta),
                    _ => (theta.norm(), theta.clone()),
                };
                if value > 0.0 && !pinned.iter().any(|&p| p) {
                    eq = (0..d).collect();
                    target = grad.iter().map(|g| lambda * g / value).collect();
                }
            }
            _ => {
                eq = (0..d).collect();
                target = vec![0.0; d];
            }
        }

        let free: Vec<usize> = (0..d).filter(|&j| !pinned[j]).collect();
        let primal = if !zero_resid.is_empty() && !free.is_empty() {
            let sub = self.x.select_rows(zero_resid).select_columns(&free);
            let theta_f = DVector::from_iterator(free.len(), free.iter().map(|&j| theta[j]));
            let y_z = DVector::from_iterator(zero_resid.len(), zero_resid.iter().map(|&i| y[i]));
            let step = least_squares_min_norm(&sub, &(&sub * &theta_f - y_z), 1e-12);
            let mut t = DVector::zeros(d);
            for (k, &j) in free.iter().enumerate() {
                t[j] = theta_f[k] - step[k];
            }
            Some(t)
        } else if pinned.iter().any(|&p| p) {
            Some(DVector::from_iterator(d, (0..d).map(|j| if pinned[j] { 0.0 } else { theta[j] })))
        } else {
            None
        };

        if !zero_resid.is_empty() && !eq.is_empty() {
            let xt = self.x.tr_mul(&w1);
            let rhs = DVector::from_iterator(eq.len(), eq.iter().zip(&target).map(|(&j, t)| t - xt[j]));
            let sub = self.x.select_rows(zero_resid).select_columns(&eq);
            let w_z = least_squares_min_norm(&sub.transpose(), &rhs, 1e-12);
            for (k, &i) in zero_resid.iter().enumerate() {
                w1[i] = w_z[k];
            }
        }
        let xt = self.x.tr_mul(&w1);
        let w2 = match &self.map {
            PenaltyMap::None => DVector::zeros(0),
            PenaltyMap::Coordinates { index, scale } => {
                DVector::from_iterator(index.len(), index.iter().zip(scale).map(|(&j, s)| xt[j] / s))
            }
            PenaltyMap::Dense(_) => self.map_pinv_t.as_ref().map_or_else(|| DVector::zeros(0), |p| p * &xt),
        };
        (primal, self.bound_from(y, penalty_weight, w1, w2))
    }

    /// Best of the theta-iterate, the point read off the penalty block
    /// (exactly sparse for `l1`) and zero.
    fn best_candidate(&self, y: &DVector<f64>, lambda: f64, ws: &Workspace, state: &AdmmState) -> (DVector<f64>, f64) {
        let d = self.x.ncols();
        let mut best = (self.objective(&ws.theta, &ws.a1, lambda), None);
        if let (true, PenaltyMap::Coordinates { index, scale }) = (self.invertible_map, &self.map) {
            let z2 = blocks(state.x.as_slice(), state.n, state.m).z2;
            let mut tz = DVector::zeros(d);
            for ((&j, s), zk) in index.iter().zip(scale).zip(z2) {
                tz[j] = zk / s;
            }
            let oz = self.objective(&tz, &(y - &self.x * &tz), lambda);
            if oz < best.0 {
                best = (oz, Some(tz));
            }
        }
        let o0 = self.fit_value(y);
        if o0 < best.0 {
            best = (o0, Some(DVector::zeros(d)));
        }
        (best.1.unwrap_or_else(|| ws.theta.clone()), best.0)
    }

    /// One round of polishing guesses, tried in order of expected payoff
    /// until the gap meets `objective_tol`. Returns the best point found,
    /// if it beats `best_obj`, and the best lower bound.
    #[allow(clippy::too_many_arguments)]
    fn polish_round(
        &self,
        y: &DVector<f64>,
        lambda: f64,
        penalty_weight: f64,
        objective_tol: f64,
        ws: &Workspace,
        state: &AdmmState,
        best_theta: &DVector<f64>,
        best_obj: f64,
    ) -> (Option<(DVector<f64>, f64)>, f64) {
        let mut best: Option<(DVector<f64>, f64)> = None;
        let mut lower = f64::NEG_INFINITY;
        let mut current = best_obj;
        let mut attempt = |start: DVector<f64>, st: Structure| -> bool {
            let (cand, bound) = self.polish(y, lambda, penalty_weight, &start, &st);
            lower = lower.max(bound);
            for t in [cand, Some(start)].into_iter().flatten() {
                let obj = self.objective(&t, &(y - &self.x * &t), lambda);
                if obj < current {
                    current = obj;
                    best = Some((t, obj));
                }
            }
            current - lower <= objective_tol * (1.0 + current.abs())
        };

        let (z_theta, _) = self.best_candidate(y, lambda, ws, state);
        let split = self.split_structure(state);
        if self.piecewise_linear(lambda) {
            // One exact descent from the split structure settles the
            // piecewise-linear case.
            let (start, _) = self.polish(y, lambda, penalty_weight, &z_theta, &split);
            let start = start.unwrap_or(z_theta);
            let exact = self.threshold_structure(y, &start, 1e-12);
            let (t, st) = self.descend(y, lambda, start, exact);
            attempt(t, st);
        } else {
            let done = 'guesses: {
                if self.fit == Fit::SqrtMspe && self.linear_on_orthants(lambda) {
                    let mut supports = vec![(z_theta.clone(), split.pinned.clone())];
                    for tau in [1e-2, 1e-3, 1e-4, 1e-5, 1e-6] {
                        supports.push((best_theta.clone(), self.threshold_structure(y, best_theta, tau).pinned));
                    }
                    supports.extend(self.dual_pinned(y, lambda, best_theta).into_iter().map(|p| (best_theta.clone(), p)));
                    supports.dedup_by(|a, b| a.1 == b.1);
                    for (t, p) in &supports {
                        if let Some(r) = self.sqrt_fit_refine(y, lambda, t, p) {
                            let st = self.threshold_structure(y, &r, 1e-12);
                            if attempt(r, st) {
                                break 'guesses true;
                            }
                        }
                    }
                }
                false
            };
            if !done
                && !attempt(z_theta, split)
                && !attempt(best_theta.clone(), self.threshold_structure(y, best_theta, 1e-6))
            {
                attempt(best_theta.clone(), self.threshold_structure(y, best_theta, 1e-9));
            }
        }
        (best, lower)
    }

    /// Rebalances `rho` from the relative primal and dual residuals of the
    /// pass `x_in -> state.x`, rescaling the multipliers to match. Returns
    /// whether `rho` changed.
    fn adapt_rho(&self, y: &DVector<f64>, ws: &Workspace, x_in: &[f64], state: &mut AdmmState, bounds: (f64, f64)) -> bool {
        let (n, m) = (state.n, state.m);
        let old = blocks(x_in, n, m);
        let new = blocks(state.x.as_slice(), n, m);
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        let norm = |a: &[f64]| a.iter().map(|p| p * p).sum::<f64>().sqrt();
        let r_pri = (sq(ws.a1.as_slice(), new.z1) + sq(ws.a2.as_slice(), new.z2)).sqrt();
        let dz1: Vec<f64> = new.z1.iter().zip(old.z1).map(|(p, q)| p - q).collect();
        let dz2: Vec<f64> = new.z2.iter().zip(old.z2).map(|(p, q)| p - q).collect();
        let r_dual = state.rho * self.a_transpose(&dz1, &dz2).norm();
        if r_pri <= 0.0 || r_dual <= 0.0 {
            return false;
        }
        let pri_scale = [ws.a1.norm(), ws.a2.norm(), norm(new.z1), norm(new.z2), y.norm()]
            .into_iter()
            .fold(0.0, f64::max);
        let xt_w1 = self.x.tr_mul(&DVectorView::from_slice(new.u1, n)).norm();
        let mut dt_w2 = DVector::zeros(self.x.ncols());
        self.map.add_transpose(new.u2, &mut dt_w2);
        let dual_scale = (state.rho * xt_w1.max(dt_w2.norm())).max(f64::MIN_POSITIVE);
        let ratio = ((r_pri / pri_scale) / (r_dual / dual_scale)).sqrt();
        if (0.2..=5.0).contains(&ratio) {
            return false;
        }
        let new_rho = (state.rho * ratio).clamp(bounds.0, bounds.1);
        if new_rho == state.rho {
            return false;
        }
        let f = state.rho / new_rho;
        state.x.rows_mut(n + m, n + m).iter_mut().for_each(|u| *u *= f);
        state.rho = new_rho;
        true
    }

    pub(crate) fn run(&self, y: &DVector<f64>, lambda: f64, opts: &SolverOptions, state: &mut AdmmState) -> SolveResult {
        let d = self.x.ncols();
        if y.norm() == 0.0 {
            return SolveResult {
                theta: DVector::zeros(d),
                objective: 0.0,
                iterations: 0,
                converged: true,
                certificate_gap: 0.0,
                trace: Vec::new(),
            };
        }

        let (n, m) = (state.n, state.m);
        let penalty_weight = lambda / self.sigma;
        // Bounds fixed by the problem, not the (possibly warm) start, so a
        // path cannot drift.
        let rho0 = self.initial_rho(y, opts);
        let rho_bounds = (1e-6 * rho0, 1e6 * rho0);
        let clamped = state.rho.clamp(rho_bounds.0, rho_bounds.1);
        if clamped != state.rho {
            let f = state.rho / clamped;
            state.x.rows_mut(n + m, n + m).iter_mut().for_each(|u| *u *= f);
            state.rho = clamped;
        }
        let mut ws = Workspace::new(n, d, m);
        let mut best_theta = DVector::zeros(d);
        let mut best_obj = self.fit_value(y);
        let mut gap = f64::INFINITY;
        let mut converged = false;
        let mut trace = Vec::new();
        let mut iterations = 0;

        // Anderson acceleration on the fixed-point map of (z, u), with a
        // fallback to the plain step whenever the extrapolated point has a
        // larger fixed-point residual than the point it came from.
        let len = state.x.len();
        let mut accel = Anderson::new(opts.anderson_memory, len);
        let mut x = state.x.clone();
        let mut tx = DVector::zeros(len);
        let mut f = DVector::zeros(len);
        let mut next = DVector::zeros(len);
        let mut plain = DVector::zeros(len);
        let mut pending: Option<f64> = None;
        let mut last_check = 0;
        let mut checks = 0usize;
        let mut next_polish = POLISH_EVERY;

        for k in 1..=opts.max_iterations {
            iterations = k;
            self.step(y, penalty_weight, opts.relaxation, state.rho, x.as_slice(), tx.as_mut_slice(), &mut ws);
            f.copy_from(&tx);
            f -= &x;
            let f_norm = f.norm();
            if let Some(f_prev) = pending.take() {
                if f_norm > f_prev {
                    accel.reset();
                    x.copy_from(&plain);
                    continue;
                }
            }

            if k - last_check >= opts.check_every || k == opts.max_iterations {
                last_check = k;
                state.x.copy_from(&tx);
                let (cand, obj) = self.best_candidate(y, lambda, &ws, state);
                if obj <= best_obj {
                    best_obj = obj;
                    best_theta = cand;
                }
                let mut lower = self.dual_bound(y, penalty_weight, state);
                checks += 1;
                if checks >= next_polish && best_obj - lower > opts.objective_tol * (1.0 + best_obj.abs()) {
                    next_polish = checks + checks.max(POLISH_EVERY) / 2;
                    let (improved, bound) =
                        self.polish_round(y, lambda, penalty_weight, opts.objective_tol, &ws, state, &best_theta, best_obj);
                    lower = lower.max(bound);
                    if let Some((t, obj)) = improved {
                        best_theta = t;
                        best_obj = obj;
                    }
                }
                gap = (best_obj - lower).max(0.0);
                trace.push(TracePoint {
                    iteration: k,
                    objective: best_obj,
                    gap,
                    rho: state.rho,
                });
                if gap <= opts.objective_tol * (1.0 + best_obj.abs()) {
                    converged = true;
                    break;
                }
                if self.adapt_rho(y, &ws, x.as_slice(), state, rho_bounds) {
                    accel.reset();
                    x.copy_from(&state.x);
                    continue;
                }
            }

            if accel.extrapolate(&tx, &f, &mut next) {
                plain.copy_from(&tx);
                pending = Some(f_norm);
                std::mem::swap(&mut x, &mut next);
            } else {
                std::mem::swap(&mut x, &mut tx);
            }
        }
        if !converged {
            state.x.copy_from(&x);
        }

        SolveResult {
            theta: best_theta,
            objective: best_obj,
            iterations,
            converged,
            certificate_gap: gap,
            trace,
        }
    }
}

/// Type-II Anderson acceleration with a ring buffer of differences.
#[derive(Debug)]
struct Anderson {
    memory: usize,
    len: usize,
    oldest: usize,
    d_t: Vec<DVector<f64>>,
    d_f: Vec<DVector<f64>>,
    /// Inner products of the residual differences, by ring slot.
    gram: DMatrix<f64>,
    last_t: DVector<f64>,
    last_f: DVector<f64>,
    has_last: bool,
}

impl Anderson {
    fn new(memory: usize, dim: usize) -> Self {
        Self {
            memory,
            len: 0,
            oldest: 0,
            d_t: vec![DVector::zeros(dim); memory],
            d_f: vec![DVector::zeros(dim); memory],
            gram: DMatrix::zeros(memory, memory),
            last_t: DVector::zeros(dim),
            last_f: DVector::zeros(dim),
            has_last: false,
        }
    }

    fn reset(&mut self) {
        self.len = 0;
        self.oldest = 0;
        self.has_last = false;
    }

    fn push(&mut self, tx: &DVector<f64>, f: &DVector<f64>) {
        let slot = if self.len < self.memory {
            self.len += 1;
            self.len - 1
        } else {
            let s = self.oldest;
            self.oldest = (self.oldest + 1) % self.memory;
            s
        };
        self.d_t[slot].copy_from(tx);
        self.d_t[slot] -= &self.last_t;
        self.d_f[slot].copy_from(f);
        self.d_f[slot] -= &self.last_f;
        for j in 0..self.len {
            let dot = self.d_f[slot].dot(&self.d_f[j]);
            self.gram[(slot, j)] = dot;
            self.gram[(j, slot)] = dot;
        }
    }

    /// Given `T(x)` and `f = T(x) - x`, writes the next point to evaluate into
    /// `out`. Returns false when there is no usable history.
    fn extrapolate(&mut self, tx: &DVector<f64>, f: &DVector<f64>, out: &mut DVector<f64>) -> bool {
        if self.memory == 0 {
            return false;
        }
        if self.has_last {
            self.push(tx, f);
        }
        self.last_t.copy_from(tx);
        self.last_f.copy_from(f);
        self.has_last = true;
        let m = self.len;
        if m == 0 {
            return false;
        }
        let mut gram = self.gram.view((0, 0), (m, m)).clone_owned();
        let rhs = DVector::from_fn(m, |i, _| self.d_f[i].dot(f));
        let reg = 1e-10 * gram.trace() / m as f64 + f64::MIN_POSITIVE;
        for i in 0..m {
            gram[(i, i)] += reg;
        }
        let Some(chol) = gram.cholesky() else {
            return false;
        };
        let gamma = chol.solve(&rhs);
        if gamma.iter().any(|g| !g.is_finite()) {
            return false;
        }
        out.copy_from(tx);
        for (g, dt) in gamma.iter().zip(&self.d_t) {
            out.axpy(-g, dt, 1.0);
        }
        true
    }
}
