use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tunedreg::covfit::tuned_criterion;
use tunedreg::experiments::default_lambda_grid;
use tunedreg::solvers::solve_path;
use tunedreg::{
    estimate_weighted, solve, tuned_estimate, CovStructure, Dataset, PsdMatrix, SolverOptions, TuneOptions, WeightPair,
};

const PAIRS: [(CovStructure, CovStructure); 4] = [
    (CovStructure::ScaledIdentity, CovStructure::ScaledIdentity),
    (CovStructure::ScaledIdentity, CovStructure::Diagonal),
    (CovStructure::Diagonal, CovStructure::ScaledIdentity),
    (CovStructure::Diagonal, CovStructure::Diagonal),
];

/// Gaussian design with a sparse signal, the shape of the NMSE study.
fn dataset(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = || rng.sample::<f64, _>(StandardNormal);
    let x = DMatrix::from_fn(n, d, |_, _| gauss());
    let theta = DVector::from_fn(d, |j, _| if j < d / 10 + 1 { gauss() } else { 0.0 });
    let noise = DVector::from_fn(n, |_, _| 0.3 * gauss());
    let y = &x * theta + noise;
    Dataset::new(x, y).unwrap()
}

fn tuned_solves(c: &mut Criterion) {
    let data = dataset(40, 40, 1);
    let opts = SolverOptions {
        objective_tol: 1e-6,
        ..SolverOptions::default()
    };
    let mut group = c.benchmark_group("solve_tuned_40x40");
    for (sc, sv) in PAIRS {
        let criterion = tuned_criterion(sc, sv, &data).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(criterion.label()), &criterion, |b, cr| {
            b.iter(|| solve(black_box(cr), black_box(&data), &opts).unwrap())
        });
    }
    group.finish();
}

fn lambda_paths(c: &mut Criterion) {
    let data = dataset(40, 40, 2);
    let opts = SolverOptions {
        objective_tol: 1e-6,
        ..SolverOptions::default()
    };
    let mut grid = default_lambda_grid();
    grid.reverse();
    let mut group = c.benchmark_group("path_61_points_40x40");
    group.sample_size(10);
    for (sc, sv) in PAIRS {
        let criterion = tuned_criterion(sc, sv, &data).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(criterion.label()), &criterion, |b, cr| {
            b.iter(|| solve_path(cr, black_box(&grid), &data, &opts).unwrap())
        });
    }
    group.finish();
}

fn closed_forms(c: &mut Criterion) {
    let data = dataset(40, 40, 3);
    let c_prior = PsdMatrix::identity(40);
    let v_noise = PsdMatrix::scaled_identity(40, 0.1).unwrap();
    let weights = WeightPair::new(c_prior, v_noise);
    c.bench_function("estimate_weighted_40x40", |b| {
        b.iter(|| estimate_weighted(black_box(&weights), black_box(&data)).unwrap())
    });
    let gram = data.gram();
    c.bench_function("psd_pseudo_inverse_40", |b| {
        b.iter(|| PsdMatrix::new(black_box(gram.clone())).unwrap().pseudo_inverse())
    });
    c.bench_function("tuned_estimate_diagonal_pair_40x40", |b| {
        b.iter(|| {
            tuned_estimate(CovStructure::Diagonal, CovStructure::Diagonal, black_box(&data), &TuneOptions::default())
                .unwrap()
        })
    });
}

criterion_group!(benches, tuned_solves, lambda_paths, closed_forms);
criterion_main!(benches);
