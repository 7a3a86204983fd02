//! `tunedreg`: fit weighted estimators, compute covariance-fitting estimates
//! and tuned regularization parameters, and run the NMSE study.

mod io;
mod weights;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tunedreg::covfit::tuned_lambda;
use tunedreg::experiments::{run_suite, summary_csv, ExperimentConfig};
use tunedreg::{
    blue, estimate_weighted, tuned_estimate, CovStructure, Dataset, EstimateReport, TuneOptions, WeightPair,
};

use crate::io::{matrix_csv, read_matrix, read_vector, vector_csv, write_atomic};
use crate::weights::WeightSpec;

/// Failure of a command, mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    Lib(tunedreg::Error),
    Input(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use tunedreg::Error as E;
        match self {
            CliError::Lib(E::Infeasible { .. } | E::NotAttained(_)) => 2,
            CliError::Lib(E::NotConverged { .. } | E::TooManyFailedTrials { .. }) => 3,
            _ => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Lib(e) => e.fmt(f),
            CliError::Input(msg) => f.write_str(msg),
        }
    }
}

impl From<tunedreg::Error> for CliError {
    fn from(e: tunedreg::Error) -> Self {
        CliError::Lib(e)
    }
}

#[derive(Parser)]
#[command(name = "tunedreg", version, about = "Weighted linear estimation with covariance-fitting weights")]
struct Cli {
    /// Worker threads for the Monte Carlo study.
    #[arg(long, global = true, env = "TUNEDREG_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Weighted estimate for given prior and noise weights (BLUE without a prior).
    Fit(FitArgs),
    /// Covariance-fitting estimate and the recovered weights.
    Tune(TuneArgs),
    /// Regularization parameter implied by a prior structure.
    Lambda(LambdaArgs),
    /// Monte Carlo NMSE curves for the synthetic cases.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Regressors, one row per observation, no header.
    #[arg(long = "x")]
    x: PathBuf,
    /// Responses, one per line, no header.
    #[arg(long = "y")]
    y: PathBuf,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset, CliError> {
        let x = read_matrix(&self.x)?;
        let y = read_vector(&self.y)?;
        if x.nrows() != y.len() {
            return Err(CliError::Input(format!(
                "{} has {} rows but {} has {}",
                self.x.display(),
                x.nrows(),
                self.y.display(),
                y.len()
            )));
        }
        Ok(Dataset::new(x, y)?)
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Prior weight C: identity, zero, scaled:K, diag:a,b,... or file:PATH.
    /// Without it the BLUE for the noise weight is computed.
    #[arg(long)]
    prior: Option<WeightSpec>,
    /// Noise weight V, same forms as --prior.
    #[arg(long, default_value = "identity")]
    noise: WeightSpec,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long = "structure-c", default_value = "scaled-identity")]
    structure_c: CovStructure,
    #[arg(long = "structure-v", default_value = "scaled-identity")]
    structure_v: CovStructure,
    /// Replaces the tuned regularization parameter.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct LambdaArgs {
    #[arg(long = "x")]
    x: PathBuf,
    #[arg(long = "structure-c", default_value = "scaled-identity")]
    structure_c: CovStructure,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

fn report_json(kind: &str, report: &EstimateReport) -> serde_json::Value {
    json!({
        "estimator": kind,
        "objective": report.objective,
        "feasibility_gap": report.residual_range_gap,
        "diagnostics": report.diagnostics.iter().map(|d| d.to_string()).collect::<Vec<_>>(),
    })
}

fn print_report(kind: &str, report: &EstimateReport) {
    println!("estimator: {kind}");
    println!("objective: {}", report.objective);
    println!("feasibility gap: {:e}", report.residual_range_gap);
    for d in &report.diagnostics {
        println!("warning: {d}");
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    write_atomic(path, &(text + "\n"))
}

fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    let data = args.data.load()?;
    let v = args.noise.build(data.n(), "noise")?;
    let (kind, report) = match &args.prior {
        Some(prior) => {
            let c = prior.build(data.d(), "prior")?;
            ("weighted", estimate_weighted(&WeightPair::new(c, v), &data)?)
        }
        None => ("blue", blue(&v, &data)?),
    };
    print_report(kind, &report);
    let theta_path = args.out.join("theta.csv");
    write_atomic(&theta_path, &vector_csv("theta", &report.theta))?;
    write_json(&args.out.join("report.json"), &report_json(kind, &report))?;
    println!("wrote {}", theta_path.display());
    Ok(())
}

fn weight_csv(prefix: &str, structure: CovStructure, w: &tunedreg::PsdMatrix) -> String {
    match structure {
        CovStructure::Unstructured => matrix_csv(prefix, w.matrix()),
        _ => vector_csv(prefix, &w.diagonal()),
    }
}

fn cmd_tune(args: &TuneArgs) -> Result<(), CliError> {
    let data = args.data.load()?;
    let opts = TuneOptions {
        lambda_override: args.lambda,
        ..TuneOptions::default()
    };
    let t = tuned_estimate(args.structure_c, args.structure_v, &data, &opts)?;
    let label = t.criterion.label();
    println!("criterion: {label} (C {}, V {})", args.structure_c, args.structure_v);
    println!("lambda: {}", t.criterion.lambda);
    if let Some(q) = t.shrinkage {
        println!("shrinkage q: {q}");
    }
    print_report("tuned", &t.report);
    if let Some(r) = t.identity_residual {
        println!("identity residual: {r:e}");
    }
    let mut report = report_json("tuned", &t.report);
    let extra = json!({
        "criterion": label,
        "structure_c": args.structure_c,
        "structure_v": args.structure_v,
        "lambda": t.criterion.lambda,
        "shrinkage": t.shrinkage,
        "identity_residual": t.identity_residual,
        "round_trip_gap": t.round_trip_gap,
        "iterations": t.solve.as_ref().map(|s| s.iterations),
        "certificate_gap": t.solve.as_ref().map(|s| s.certificate_gap),
    });
    report.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
    write_atomic(&args.out.join("theta.csv"), &vector_csv("theta", t.theta()))?;
    write_atomic(&args.out.join("c_hat.csv"), &weight_csv("c", args.structure_c, &t.weights().c))?;
    write_atomic(&args.out.join("v_hat.csv"), &weight_csv("v", args.structure_v, &t.weights().v))?;
    write_json(&args.out.join("report.json"), &report)?;
    println!("wrote theta.csv, c_hat.csv, v_hat.csv and report.json to {}", args.out.display());
    Ok(())
}

fn cmd_lambda(args: &LambdaArgs) -> Result<(), CliError> {
    let x = read_matrix(&args.x)?;
    println!("{}", tuned_lambda(args.structure_c, &x)?);
    Ok(())
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(trials) = args.trials {
        config.trials = trials;
    }
    config.validate()?;
    let curves = run_suite(&config)?;
    for c in &curves {
        let stem = format!("case{}-{}", c.case.case_id, c.estimator);
        write_atomic(&args.out.join(format!("{stem}.csv")), &c.to_csv())?;
        write_json(&args.out.join(format!("{stem}.json")), &c.metadata())?;
    }
    let summary = summary_csv(&curves);
    write_atomic(&args.out.join("summary.csv"), &summary)?;
    let record = json!({
        "config": config.to_json(),
        "curves": curves.iter().map(|c| c.metadata()).collect::<Vec<_>>(),
    });
    write_json(&args.out.join("summary.json"), &record)?;
    print!("{summary}");
    println!("wrote {} curves to {}", curves.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Input(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Tune(args) => cmd_tune(args),
        Command::Lambda(args) => cmd_lambda(args),
        Command::Experiment(args) => cmd_experiment(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 4 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
