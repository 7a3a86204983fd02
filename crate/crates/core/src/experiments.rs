//! Monte Carlo NMSE studies of the tuned estimators.
//!
//! Three synthetic cases share one Gaussian design per case:
//!
//! 1. `C = I`, `V = v I`.
//! 2. `C` diagonal with `sparsity` unit entries, `V = v I`.
//! 3. Case 2 plus `outlier_count` noise variances raised to `outlier_variance`.
//!
//! `v` is fixed by `tr{X C X^T} / tr{v I} = snr` before any outliers are set.
//! Every trial draws `theta ~ N(0, C)` and `y = X theta + eps` from its own
//! random stream, so trials can run in any order or in parallel and a curve
//! depends only on the seed and the case.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::covfit::{tuned_criterion_for_design, CovStructure, Criterion};
use crate::error::{Error, Result};
use crate::linalg::PsdMatrix;
use crate::solvers::{PathSolver, SolverOptions};

/// Largest tolerated fraction of failed trials per curve.
pub const MAX_FAILED_FRACTION: f64 = 0.01;

/// Parameters of one synthetic case.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentCase {
    pub case_id: u8,
    pub n: usize,
    pub d: usize,
    pub snr: f64,
    /// Number of unit prior variances in cases 2 and 3.
    pub sparsity: usize,
    /// Number of outlier noise variances in case 3.
    pub outlier_count: usize,
    pub outlier_variance: f64,
    pub seed: u64,
}

impl ExperimentCase {
    /// Defaults for a case: SNR 10, `max(1, d / 10)` active coefficients and
    /// two outliers of variance 500 (case 3 only).
    pub fn new(case_id: u8, n: usize, d: usize, seed: u64) -> Self {
        Self {
            case_id,
            n,
            d,
            snr: 10.0,
            sparsity: (d / 10).max(1),
            outlier_count: if case_id == 3 { 2 } else { 0 },
            outlier_variance: 500.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if !(1..=3).contains(&self.case_id) {
            return bad(format!("case_id must be 1, 2 or 3, got {}", self.case_id));
        }
        if self.n == 0 || self.d == 0 {
            return bad("n and d must be positive".into());
        }
        if !(self.snr.is_finite() && self.snr > 0.0) {
            return bad(format!("snr must be positive, got {}", self.snr));
        }
        if self.case_id > 1 && !(1..=self.d).contains(&self.sparsity) {
            return bad(format!("sparsity must lie in 1..={}, got {}", self.d, self.sparsity));
        }
        if self.case_id == 3 && self.outlier_count > self.n {
            return bad(format!("outlier_count must not exceed n = {}, got {}", self.n, self.outlier_count));
        }
        if !(self.outlier_variance.is_finite() && self.outlier_variance > 0.0) {
            return bad(format!("outlier_variance must be positive, got {}", self.outlier_variance));
        }
        Ok(())
    }

    /// Random stream of trial `trial`, independent of every other trial and
    /// of the design.
    pub fn trial_rng(&self, trial: usize) -> ChaCha8Rng {
        self.rng(trial as u64 + 1)
    }

    /// Random stream for the design (`index = 0`) or trial `index - 1`.
    fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((u64::from(self.case_id) << 40) | index);
        rng
    }
}

/// Fixed quantities of a case.
#[derive(Debug, Clone)]
pub struct GeneratedCase {
    pub x: DMatrix<f64>,
    pub c_prior: PsdMatrix,
    pub v_noise: PsdMatrix,
    /// Noise variance before any outlier substitution.
    pub v: f64,
}

/// Draws the design and builds the prior and noise covariances. Active
/// coefficients and outliers occupy the leading positions; rows and columns
/// of the design are exchangeable, so this loses no generality.
pub fn generate_case(spec: &ExperimentCase) -> Result<GeneratedCase> {
    spec.validate()?;
    let mut rng = spec.rng(0);
    let x = DMatrix::from_fn(spec.n, spec.d, |_, _| normal(&mut rng));
    let prior: Vec<f64> = match spec.case_id {
        1 => vec![1.0; spec.d],
        _ => (0..spec.d).map(|j| if j < spec.sparsity { 1.0 } else { 0.0 }).collect(),
    };
    let signal: f64 = x
        .column_iter()
        .zip(&prior)
        .map(|(col, c)| c * col.norm_squared())
        .sum();
    let v = signal / (spec.n as f64 * spec.snr);
    let mut noise = vec![v; spec.n];
    if spec.case_id == 3 {
        noise[..spec.outlier_count].fill(spec.outlier_variance);
    }
    Ok(GeneratedCase {
        x,
        c_prior: PsdMatrix::from_diagonal(&prior)?,
        v_noise: PsdMatrix::from_diagonal(&noise)?,
        v,
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `N(0, cov)` through the spectral factor, so null directions of `cov` are
/// exactly zero.
fn sample_gaussian(cov: &PsdMatrix, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let f = cov.spectral_factor();
    let z = DVector::from_fn(f.rank(), |k, _| f.eigenvalues[k].sqrt() * normal(rng));
    &f.basis * z
}

/// One draw of `(theta, y)` with `theta ~ N(0, C)`, `eps ~ N(0, V)` and
/// `y = X theta + eps`.
pub fn sample_trial(
    x: &DMatrix<f64>,
    c_prior: &PsdMatrix,
    v_noise: &PsdMatrix,
    rng: &mut ChaCha8Rng,
) -> Result<(DVector<f64>, DVector<f64>)> {
    crate::error::check_dim("prior covariance", x.ncols(), c_prior.dim())?;
    crate::error::check_dim("noise covariance", x.nrows(), v_noise.dim())?;
    let theta = sample_gaussian(c_prior, rng);
    let eps = sample_gaussian(v_noise, rng);
    let y = x * &theta + eps;
    Ok((theta, y))
}

/// `tr{C - C X^T R^+ X C} / tr{C}` with `R = X C X^T + V`: the NMSE of the
/// estimator that knows the true covariances.
pub fn oracle_nmse(x: &DMatrix<f64>, c_prior: &PsdMatrix, v_noise: &PsdMatrix) -> Result<f64> {
    crate::error::check_dim("prior covariance", x.ncols(), c_prior.dim())?;
    crate::error::check_dim("noise covariance", x.nrows(), v_noise.dim())?;
    let tr = c_prior.trace();
    if tr <= 0.0 {
        return Err(Error::DegeneratePrior);
    }
    let xc = x * c_prior.matrix();
    let r = PsdMatrix::new(&xc * x.transpose() + v_noise.matrix())?;
    let reduction = (xc.transpose() * r.pseudo_inverse().matrix() * &xc).trace();
    Ok(((tr - reduction) / tr).max(0.0))
}

/// 60 log-spaced points on `[1e-3, 2]` plus zero, ascending.
pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(1e-3, 2.0, 60, true)
}

/// `points` log-spaced values on `[min, max]`, optionally with zero, ascending.
pub fn log_grid(min: f64, max: f64, points: usize, include_zero: bool) -> Vec<f64> {
    let mut grid = Vec::with_capacity(points + 1);
    if include_zero {
        grid.push(0.0);
    }
    match points {
        0 => {}
        1 => grid.push(min),
        _ => {
            let (a, b) = (min.ln(), max.ln());
            grid.extend((0..points).map(|k| (a + (b - a) * k as f64 / (points - 1) as f64).exp()));
        }
    }
    grid
}

/// An estimator in the sweep, named by fit then penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EstimatorSpec {
    pub structure_c: CovStructure,
    pub structure_v: CovStructure,
}

impl EstimatorSpec {
    pub const ALL: [EstimatorSpec; 4] = [
        EstimatorSpec::new(CovStructure::ScaledIdentity, CovStructure::ScaledIdentity),
        EstimatorSpec::new(CovStructure::ScaledIdentity, CovStructure::Diagonal),
        EstimatorSpec::new(CovStructure::Diagonal, CovStructure::ScaledIdentity),
        EstimatorSpec::new(CovStructure::Diagonal, CovStructure::Diagonal),
    ];

    pub const fn new(structure_c: CovStructure, structure_v: CovStructure) -> Self {
        Self { structure_c, structure_v }
    }

    /// `l2-l2`, `l1-l2`, `l2-wl1` or `l1-wl1`.
    pub fn label(&self) -> &'static str {
        use CovStructure::*;
        match (self.structure_c, self.structure_v) {
            (ScaledIdentity, ScaledIdentity) => "l2-l2",
            (ScaledIdentity, Diagonal) => "l1-l2",
            (Diagonal, ScaledIdentity) => "l2-wl1",
            (Diagonal, Diagonal) => "l1-wl1",
            _ => "unsupported",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.label() == label)
    }
}

/// Monte Carlo NMSE of one estimator as a function of the regularization
/// parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NmseCurve {
    pub case: ExperimentCase,
    pub estimator: String,
    pub structure_c: CovStructure,
    pub structure_v: CovStructure,
    /// Ascending.
    pub lambdas: Vec<f64>,
    pub nmse: Vec<f64>,
    pub stderr: Vec<f64>,
    pub tuned_lambda: f64,
    pub tuned_nmse: f64,
    pub tuned_stderr: f64,
    pub oracle_nmse: f64,
    /// Trials that entered the averages.
    pub trials: usize,
    pub failed_trials: usize,
}

impl NmseCurve {
    /// Smallest NMSE on the grid and its parameter.
    pub fn minimum(&self) -> (f64, f64) {
        self.lambdas
            .iter()
            .zip(&self.nmse)
            .fold((f64::NAN, f64::INFINITY), |best, (&l, &v)| if v < best.1 { (l, v) } else { best })
    }

    /// NMSE at the grid point equal to `lambda`, if present.
    pub fn at(&self, lambda: f64) -> Option<(f64, f64)> {
        self.lambdas
            .iter()
            .position(|&l| l == lambda)
            .map(|i| (self.nmse[i], self.stderr[i]))
    }

    /// `lambda,nmse,stderr` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,nmse,stderr\n");
        for ((l, v), s) in self.lambdas.iter().zip(&self.nmse).zip(&self.stderr) {
            out.push_str(&format!("{l:e},{v:e},{s:e}\n"));
        }
        out
    }

    /// Sidecar record: tuned and oracle values plus the case parameters.
    pub fn metadata(&self) -> Value {
        json!({
            "estimator": self.estimator,
            "structure_c": self.structure_c,
            "structure_v": self.structure_v,
            "tuned_lambda": self.tuned_lambda,
            "tuned_nmse": self.tuned_nmse,
            "tuned_stderr": self.tuned_stderr,
            "oracle_nmse": self.oracle_nmse,
            "trials": self.trials,
            "failed_trials": self.failed_trials,
            "case": self.case,
        })
    }
}

/// Mean and standard error of the mean.
fn mean_stderr(values: impl ExactSizeIterator<Item = f64> + Clone) -> (f64, f64) {
    let k = values.len();
    if k == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / k as f64;
    if k == 1 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
    (mean, (var / k as f64).sqrt())
}

struct PreparedEstimator {
    spec: EstimatorSpec,
    criterion: Criterion,
    solver: PathSolver,
    /// Grid plus the tuned value, largest first.
    path: Vec<f64>,
}

/// Per-trial squared errors for each estimator: `errors[e][k]` for the
/// `k`-th point of estimator `e`'s path, or `None` if a solve failed.
type TrialErrors = Vec<Option<Vec<f64>>>;

/// NMSE curves of several estimators on one case, sharing every trial.
pub fn nmse_curves(
    case: &ExperimentCase,
    estimators: &[EstimatorSpec],
    lambdas: &[f64],
    trials: usize,
    opts: &SolverOptions,
) -> Result<Vec<NmseCurve>> {
    if trials == 0 {
        return Err(Error::InvalidInput("trials must be at least 1".into()));
    }
    if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::InvalidInput("lambdas must be finite and nonnegative".into()));
    }
    let mut grid = lambdas.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let generated = generate_case(case)?;
    let oracle = oracle_nmse(&generated.x, &generated.c_prior, &generated.v_noise)?;
    let tr_c = generated.c_prior.trace();

    let prepared = estimators
        .iter()
        .map(|&spec| {
            let criterion = tuned_criterion_for_design(spec.structure_c, spec.structure_v, &generated.x)?;
            let solver = PathSolver::new(&generated.x, criterion.fit, &criterion.penalty)?;
            let mut path = grid.clone();
            path.push(criterion.lambda);
            path.sort_by(|a, b| b.total_cmp(a));
            Ok(PreparedEstimator {
                spec,
                criterion,
                solver,
                path,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let per_trial: Vec<TrialErrors> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = case.trial_rng(t);
            let (theta, y) = sample_trial(&generated.x, &generated.c_prior, &generated.v_noise, &mut rng)
                .expect("dimensions fixed by generate_case");
            prepared
                .iter()
                .map(|p| {
                    let results = p.solver.solve(&y, &p.path, opts);
                    if results.iter().any(|r| !r.converged) {
                        return None;
                    }
                    Some(results.iter().map(|r| (&r.theta - &theta).norm_squared() / tr_c).collect())
                })
                .collect()
        })
        .collect();

    prepared
        .iter()
        .enumerate()
        .map(|(e, p)| {
            let ok: Vec<&Vec<f64>> = per_trial.iter().filter_map(|t| t[e].as_ref()).collect();
            let failed = trials - ok.len();
            if failed as f64 > MAX_FAILED_FRACTION * trials as f64 {
                return Err(Error::TooManyFailedTrials { failed, trials });
            }
            let column = |k: usize| mean_stderr(ok.iter().map(move |errs| errs[k]));
            // Position in the descending path of a grid value or the tuned value.
            let index_of = |lambda: f64| p.path.iter().position(|&l| l == lambda).expect("value is on the path");
            let (nmse, stderr): (Vec<f64>, Vec<f64>) = grid.iter().map(|&l| column(index_of(l))).unzip();
            let (tuned_nmse, tuned_stderr) = column(index_of(p.criterion.lambda));
            Ok(NmseCurve {
                case: case.clone(),
                estimator: p.spec.label().to_string(),
                structure_c: p.spec.structure_c,
                structure_v: p.spec.structure_v,
                lambdas: grid.clone(),
                nmse,
                stderr,
                tuned_lambda: p.criterion.lambda,
                tuned_nmse,
                tuned_stderr,
                oracle_nmse: oracle,
                trials: ok.len(),
                failed_trials: failed,
            })
        })
        .collect()
}

/// NMSE curve of the estimator for one structure pair.
pub fn nmse_curve(
    case: &ExperimentCase,
    structure_c: CovStructure,
    structure_v: CovStructure,
    lambdas: &[f64],
    trials: usize,
    opts: &SolverOptions,
) -> Result<NmseCurve> {
    let spec = EstimatorSpec::new(structure_c, structure_v);
    Ok(nmse_curves(case, &[spec], lambdas, trials, opts)?.remove(0))
}

/// Settings of a full study, read from a flat JSON object.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub cases: Vec<u8>,
    pub n: usize,
    pub d: usize,
    pub trials: usize,
    pub seed: u64,
    pub snr: f64,
    /// `None` uses `max(1, d / 10)`.
    pub sparsity: Option<usize>,
    pub outlier_count: usize,
    pub outlier_variance: f64,
    pub estimators: Vec<EstimatorSpec>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_points: usize,
    pub include_zero: bool,
    /// Added to the log grid.
    pub extra_lambdas: Vec<f64>,
    pub solver_tol: f64,
    pub max_iterations: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cases: vec![1, 2, 3],
            n: 40,
            d: 40,
            trials: 200,
            seed: 1,
            snr: 10.0,
            sparsity: None,
            outlier_count: 2,
            outlier_variance: 500.0,
            estimators: EstimatorSpec::ALL.to_vec(),
            lambda_min: 1e-3,
            lambda_max: 2.0,
            lambda_points: 60,
            include_zero: true,
            extra_lambdas: Vec::new(),
            solver_tol: 1e-6,
            max_iterations: 20_000,
        }
    }
}

fn config_error(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .and_then(|u| usize::try_from(u).ok())
        .ok_or_else(|| config_error(key, format!("expected a nonnegative integer, got {v}")))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .filter(|f| f.is_finite())
        .ok_or_else(|| config_error(key, format!("expected a finite number, got {v}")))
}

fn as_array<'a>(key: &str, v: &'a Value) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| config_error(key, format!("expected an array, got {v}")))
}

impl ExperimentConfig {
    /// Parses and validates a JSON object. Unknown keys and bad values are
    /// reported with the offending key; missing keys keep their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| config_error("<document>", e.to_string()))?;
        let Value::Object(map) = value else {
            return Err(config_error("<document>", "expected a JSON object"));
        };
        Self::from_map(&map)
    }

    fn from_map(map: &Map<String, Value>) -> Result<Self> {
        let mut c = Self::default();
        for (key, v) in map {
            let k = key.as_str();
            match k {
                "cases" => {
                    c.cases = as_array(k, v)?
                        .iter()
                        .map(|e| match as_usize(k, e)? {
                            id @ 1..=3 => Ok(id as u8),
                            other => Err(config_error(k, format!("case ids are 1, 2 or 3, got {other}"))),
                        })
                        .collect::<Result<_>>()?
                }
                "n" => c.n = as_usize(k, v)?,
                "d" => c.d = as_usize(k, v)?,
                "trials" => c.trials = as_usize(k, v)?,
                "seed" => c.seed = v.as_u64().ok_or_else(|| config_error(k, format!("expected a nonnegative integer, got {v}")))?,
                "snr" => c.snr = as_f64(k, v)?,
                "sparsity" => c.sparsity = if v.is_null() { None } else { Some(as_usize(k, v)?) },
                "outlier_count" => c.outlier_count = as_usize(k, v)?,
                "outlier_variance" => c.outlier_variance = as_f64(k, v)?,
                "estimators" => {
                    c.estimators = as_array(k, v)?
                        .iter()
                        .map(|e| {
                            e.as_str()
                                .and_then(EstimatorSpec::from_label)
                                .ok_or_else(|| config_error(k, format!("unknown estimator {e}; expected l2-l2, l1-l2, l2-wl1 or l1-wl1")))
                        })
                        .collect::<Result<_>>()?
                }
                "lambda_min" => c.lambda_min = as_f64(k, v)?,
                "lambda_max" => c.lambda_max = as_f64(k, v)?,
                "lambda_points" => c.lambda_points = as_usize(k, v)?,
                "include_zero" => c.include_zero = v.as_bool().ok_or_else(|| config_error(k, format!("expected true or false, got {v}")))?,
                "extra_lambdas" => c.extra_lambdas = as_array(k, v)?.iter().map(|e| as_f64(k, e)).collect::<Result<_>>()?,
                "solver_tol" => c.solver_tol = as_f64(k, v)?,
                "max_iterations" => c.max_iterations = as_usize(k, v)?,
                _ => return Err(config_error(k, "unknown key")),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(config_error(key, msg)) };
        check(!self.cases.is_empty(), "cases", "at least one case is required")?;
        check(self.n > 0, "n", "must be positive")?;
        check(self.d > 0, "d", "must be positive")?;
        check(self.trials > 0, "trials", "must be positive")?;
        check(self.snr > 0.0, "snr", "must be positive")?;
        if let Some(s) = self.sparsity {
            check((1..=self.d).contains(&s), "sparsity", "must lie between 1 and d")?;
        }
        check(self.outlier_count <= self.n, "outlier_count", "must not exceed n")?;
        check(self.outlier_variance > 0.0, "outlier_variance", "must be positive")?;
        check(!self.estimators.is_empty(), "estimators", "at least one estimator is required")?;
        check(self.lambda_min > 0.0, "lambda_min", "must be positive")?;
        check(self.lambda_max >= self.lambda_min, "lambda_max", "must be at least lambda_min")?;
        check(
            self.extra_lambdas.iter().all(|l| *l >= 0.0),
            "extra_lambdas",
            "values must be nonnegative",
        )?;
        check(self.solver_tol > 0.0, "solver_tol", "must be positive")?;
        check(self.max_iterations > 0, "max_iterations", "must be positive")?;
        Ok(())
    }

    /// The full configuration, every key present.
    pub fn to_json(&self) -> Value {
        json!({
            "cases": self.cases,
            "n": self.n,
            "d": self.d,
            "trials": self.trials,
            "seed": self.seed,
            "snr": self.snr,
            "sparsity": self.sparsity,
            "outlier_count": self.outlier_count,
            "outlier_variance": self.outlier_variance,
            "estimators": self.estimators.iter().map(|e| e.label()).collect::<Vec<_>>(),
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "lambda_points": self.lambda_points,
            "include_zero": self.include_zero,
            "extra_lambdas": self.extra_lambdas,
            "solver_tol": self.solver_tol,
            "max_iterations": self.max_iterations,
        })
    }

    pub fn lambdas(&self) -> Vec<f64> {
        let mut grid = log_grid(self.lambda_min, self.lambda_max, self.lambda_points, self.include_zero);
        grid.extend(&self.extra_lambdas);
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        grid
    }

    pub fn case(&self, case_id: u8) -> ExperimentCase {
        let mut case = ExperimentCase::new(case_id, self.n, self.d, self.seed);
        case.snr = self.snr;
        if let Some(s) = self.sparsity {
            case.sparsity = s;
        }
        case.outlier_count = if case_id == 3 { self.outlier_count } else { 0 };
        case.outlier_variance = self.outlier_variance;
        case
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            objective_tol: self.solver_tol,
            max_iterations: self.max_iterations,
            ..SolverOptions::default()
        }
    }
}

/// All curves of a study, case by case in configuration order.
pub fn run_suite(config: &ExperimentConfig) -> Result<Vec<NmseCurve>> {
    config.validate()?;
    let lambdas = config.lambdas();
    let opts = config.solver_options();
    let mut curves = Vec::new();
    for &case_id in &config.cases {
        curves.extend(nmse_curves(&config.case(case_id), &config.estimators, &lambdas, config.trials, &opts)?);
    }
    Ok(curves)
}

/// One line per curve: case, estimator, tuned and oracle values, grid minimum.
pub fn summary_csv(curves: &[NmseCurve]) -> String {
    let mut out = String::from(
        "case,estimator,tuned_lambda,tuned_nmse,tuned_stderr,min_lambda,min_nmse,oracle_nmse,trials,failed_trials\n",
    );
    for c in curves {
        let (min_lambda, min_nmse) = c.minimum();
        out.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{},{}\n",
            c.case.case_id,
            c.estimator,
            c.tuned_lambda,
            c.tuned_nmse,
            c.tuned_stderr,
            min_lambda,
            min_nmse,
            c.oracle_nmse,
            c.trials,
            c.failed_trials
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn case_one_snr_is_exact() {
        let spec = ExperimentCase::new(1, 4, 4, 3);
        let g = generate_case(&spec).unwrap();
        assert_eq!(g.c_prior.matrix(), &DMatrix::identity(4, 4));
        let signal = (&g.x * g.x.transpose()).trace();
        assert_relative_eq!(signal / g.v_noise.trace(), 10.0, max_relative = 1e-12);
    }

    #[test]
    fn case_two_has_requested_support() {
        let mut spec = ExperimentCase::new(2, 8, 10, 5);
        spec.sparsity = 1;
        let g = generate_case(&spec).unwrap();
        assert_eq!(g.c_prior.diagonal().iter().filter(|&&c| c != 0.0).count(), 1);
    }

    #[test]
    fn case_three_outliers_follow_snr() {
        let spec = ExperimentCase::new(3, 12, 10, 5);
        let g = generate_case(&spec).unwrap();
        let diag = g.v_noise.diagonal();
        assert_eq!(diag.iter().filter(|&&v| v == 500.0).count(), 2);
        assert!(diag.iter().filter(|&&v| v != 500.0).all(|&v| v == g.v));
        let signal = (&g.x * g.c_prior.matrix() * g.x.transpose()).trace();
        assert_relative_eq!(signal / (12.0 * g.v), 10.0, max_relative = 1e-12);
    }

    #[test]
    fn degenerate_covariances_sample_exactly() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (theta, y) = sample_trial(&x, &PsdMatrix::zeros(2), &PsdMatrix::identity(2), &mut rng).unwrap();
        assert_eq!(theta, DVector::zeros(2));
        assert!(y.norm() > 0.0);
        let (theta, y) = sample_trial(&x, &PsdMatrix::identity(2), &PsdMatrix::zeros(2), &mut rng).unwrap();
        assert_eq!(y, &x * theta);
    }

    #[test]
    fn oracle_closed_forms() {
        let i3 = DMatrix::identity(3, 3);
        assert_eq!(oracle_nmse(&i3, &PsdMatrix::identity(3), &PsdMatrix::zeros(3)).unwrap(), 0.0);
        let v = 0.3;
        let nmse = oracle_nmse(&i3, &PsdMatrix::identity(3), &PsdMatrix::scaled_identity(3, v).unwrap()).unwrap();
        assert_relative_eq!(nmse, v / (1.0 + v), max_relative = 1e-12);
        assert!(matches!(
            oracle_nmse(&i3, &PsdMatrix::zeros(3), &PsdMatrix::identity(3)),
            Err(Error::DegeneratePrior)
        ));
    }

    #[test]
    fn grid_shape() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 61);
        assert_eq!(g[0], 0.0);
        assert_relative_eq!(g[1], 1e-3, max_relative = 1e-12);
        assert_relative_eq!(g[60], 2.0, max_relative = 1e-12);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn labels_round_trip() {
        for e in EstimatorSpec::ALL {
            assert_eq!(EstimatorSpec::from_label(e.label()), Some(e));
        }
    }

    #[test]
    fn config_reports_offending_key() {
        let err = ExperimentConfig::from_json(r#"{"n": 10, "trails": 3}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "trails"));
        let err = ExperimentConfig::from_json(r#"{"snr": "high"}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "snr"));
        let err = ExperimentConfig::from_json(r#"{"estimators": ["l3-l3"]}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "estimators"));
        let err = ExperimentConfig::from_json(r#"{"trials": 0}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "trials"));
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = ExperimentConfig {
            trials: 7,
            extra_lambdas: vec![10.0],
            estimators: vec![EstimatorSpec::ALL[3]],
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::from_json(&c.to_json().to_string()).unwrap();
        assert_eq!(back, c);
        assert!(back.lambdas().contains(&10.0));
    }

    #[test]
    fn small_curve_is_reproducible() {
        let case = ExperimentCase::new(2, 8, 6, 11);
        let grid = [0.0, 0.1, 1.0];
        let opts = SolverOptions {
            objective_tol: 1e-7,
            ..SolverOptions::default()
        };
        let a = nmse_curves(&case, &EstimatorSpec::ALL, &grid, 6, &opts).unwrap();
        let b = nmse_curves(&case, &EstimatorSpec::ALL, &grid, 6, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(a[0].to_csv().lines().count(), 4);
        let single = nmse_curve(&case, CovStructure::Diagonal, CovStructure::Diagonal, &grid, 6, &opts).unwrap();
        assert_eq!(single, a[3]);
    }
}
