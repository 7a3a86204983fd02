//! Invariants and small closed-form oracles across the core modules.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tunedreg::covfit::{cost_j, spice_criterion};
use tunedreg::estimators::{marginal_mse_of_linear, oracle_mse_weights, weighted_gain};
use tunedreg::experiments::{generate_case, nmse_curve, oracle_nmse, sample_trial, ExperimentCase};
use tunedreg::linalg::{in_range, weighted_sq_norm};
use tunedreg::{blue, estimate_weighted, lmmse, CovStructure, Dataset, PsdMatrix, SolverOptions, WeightPair};

fn gauss_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn gauss_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// `B B^T + shift I` with `B` of shape `dim x rank`.
fn psd(rng: &mut ChaCha8Rng, dim: usize, rank: usize, shift: f64) -> PsdMatrix {
    let b = gauss_matrix(rng, dim, rank);
    PsdMatrix::new(&b * b.transpose() + DMatrix::identity(dim, dim) * shift).unwrap()
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, rel: f64) -> bool {
    (a - b).norm() <= rel * a.norm().max(b.norm()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pseudo_inverse_scales_inversely(seed in any::<u64>(), dim in 2usize..7, alpha_exp in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rank = rng.random_range(1..=dim);
        let a = psd(&mut rng, dim, rank, 0.0);
        let alpha = 10f64.powf(alpha_exp);
        let scaled = PsdMatrix::new(a.matrix() * alpha).unwrap();
        let expected = a.pseudo_inverse().matrix() / alpha;
        prop_assert!(close(scaled.pseudo_inverse().matrix(), &expected, 1e-8));
    }

    #[test]
    fn range_membership(seed in any::<u64>(), dim in 3usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rank = rng.random_range(1..dim);
        let a = psd(&mut rng, dim, rank, 0.0);
        let inside = a.matrix() * gauss_vector(&mut rng, dim);
        prop_assert!(in_range(&inside, &a, 1e-9).unwrap());

        let z = gauss_vector(&mut rng, dim);
        let mut null = &z - a.project_onto_range(&z);
        null /= null.norm();
        let outside = inside.normalize() + null;
        prop_assert!(!in_range(&outside, &a, 1e-6).unwrap());
    }

    #[test]
    fn seminorm_is_definite_on_the_range(seed in any::<u64>(), dim in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rank = rng.random_range(1..=dim);
        let a = psd(&mut rng, dim, rank, 0.0);
        let x = a.matrix() * gauss_vector(&mut rng, dim);
        let smallest = a.spectral_factor().eigenvalues.min();
        let norm2 = weighted_sq_norm(&x, &a).unwrap();
        prop_assert!(norm2 >= smallest * x.norm_squared() * (1.0 - 1e-9));
        prop_assert!(norm2 > 0.0 || x.norm() == 0.0);
    }

    #[test]
    fn weighted_estimate_is_scale_invariant(seed in any::<u64>(), n in 2usize..8, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Dataset::new(gauss_matrix(&mut rng, n, d), gauss_vector(&mut rng, n)).unwrap();
        let w = WeightPair::new(psd(&mut rng, d, d, 0.1), psd(&mut rng, n, n, 0.1));
        let base = estimate_weighted(&w, &data).unwrap().theta;
        for alpha in [1e-3, 1.0, 1e3] {
            let theta = estimate_weighted(&w.scaled(alpha).unwrap(), &data).unwrap().theta;
            prop_assert!((&theta - &base).norm() <= 1e-9 * base.norm().max(1.0));
        }
    }

    #[test]
    fn scaled_identity_weights_give_ridge(seed in any::<u64>(), n in 2usize..9, d in 1usize..6, c in 0.05f64..5.0, v in 0.05f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gauss_matrix(&mut rng, n, d);
        let y = gauss_vector(&mut rng, n);
        let data = Dataset::new(x.clone(), y.clone()).unwrap();
        let w = WeightPair::new(PsdMatrix::scaled_identity(d, c).unwrap(), PsdMatrix::scaled_identity(n, v).unwrap());
        let theta = estimate_weighted(&w, &data).unwrap().theta;
        let system = x.transpose() * &x + DMatrix::identity(d, d) * (v / c);
        let ridge = system.lu().solve(&(x.transpose() * &y)).unwrap();
        prop_assert!((&theta - &ridge).norm() <= 1e-9 * ridge.norm().max(1.0));
    }

    #[test]
    fn cost_j_is_minimized_by_the_weighted_estimate(seed in any::<u64>(), n in 2usize..8, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Dataset::new(gauss_matrix(&mut rng, n, d), gauss_vector(&mut rng, n)).unwrap();
        let w = WeightPair::new(psd(&mut rng, d, d, 0.2), psd(&mut rng, n, n, 0.2));
        let theta = estimate_weighted(&w, &data).unwrap().theta;
        let best = cost_j(&theta, &w, &data).unwrap();
        for _ in 0..20 {
            let step = gauss_vector(&mut rng, d) * rng.random_range(1e-4..1.0);
            prop_assert!(cost_j(&(&theta + step), &w, &data).unwrap() >= best * (1.0 - 1e-12));
        }
    }

    #[test]
    fn spice_matches_its_definition(seed in any::<u64>(), n in 1usize..7, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gauss_matrix(&mut rng, n, d);
        let y = gauss_vector(&mut rng, n);
        let data = Dataset::new(x.clone(), y.clone()).unwrap();
        let w = WeightPair::new(psd(&mut rng, d, d, 0.1), psd(&mut rng, n, n, 0.1));
        let r = &x * w.c.matrix() * x.transpose() + w.v.matrix();
        let gap = &y * y.transpose() - &r;
        let r_inv = r.clone().try_inverse().unwrap();
        let direct = (&gap * r_inv * &gap).trace();
        let value = spice_criterion(&w, &data).unwrap();
        prop_assert!((value - direct).abs() <= 1e-8 * direct.max(1.0));
    }
}

#[test]
fn weighted_sq_norm_examples() {
    let x = DVector::from_vec(vec![3.0, 4.0]);
    assert!((weighted_sq_norm(&x, &PsdMatrix::identity(2)).unwrap() - 25.0).abs() < 1e-12);
    let x = DVector::from_vec(vec![1.0, -1.0]);
    let w = PsdMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
    assert!((weighted_sq_norm(&x, &w).unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn blue_examples() {
    let x = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
    let data = Dataset::new(x, DVector::from_vec(vec![1.0, 2.0])).unwrap();
    let v = PsdMatrix::from_diagonal(&[1.0, 4.0]).unwrap();
    assert!((blue(&v, &data).unwrap().theta[0] - 1.2).abs() < 1e-12);
    // A noiseless second observation pins the estimate to it.
    let v = PsdMatrix::from_diagonal(&[1.0, 0.0]).unwrap();
    assert!((blue(&v, &data).unwrap().theta[0] - 2.0).abs() < 1e-12);
}

#[test]
fn spice_scalar_example_and_exact_fit() {
    // n = d = 1, X = 1, y = 1, C = V = 1: R = 2 and (1 - 2)^2 / 2.
    let data = Dataset::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 1.0)).unwrap();
    let w = WeightPair::new(PsdMatrix::identity(1), PsdMatrix::identity(1));
    assert!((spice_criterion(&w, &data).unwrap() - 0.5).abs() < 1e-14);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = gauss_vector(&mut rng, 5);
    let data = Dataset::new(gauss_matrix(&mut rng, 5, 3), y.clone()).unwrap();
    let w = WeightPair::new(PsdMatrix::zeros(3), PsdMatrix::outer(&y, 1.0).unwrap());
    assert!(spice_criterion(&w, &data).unwrap() < 1e-10 * y.norm_squared().powi(2));
}

#[test]
fn lmmse_gain_minimizes_marginal_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, d) = (6, 4);
    let x = gauss_matrix(&mut rng, n, d);
    let c = psd(&mut rng, d, 2, 0.0);
    let v = psd(&mut rng, n, n, 0.1);
    let k = weighted_gain(&WeightPair::new(c.clone(), v.clone()), &x).unwrap();
    let best = marginal_mse_of_linear(&k, &c, &v, &x).unwrap();

    let r = PsdMatrix::new(&x * c.matrix() * x.transpose() + v.matrix()).unwrap();
    let closed = (c.matrix() - c.matrix() * x.transpose() * r.pseudo_inverse().matrix() * &x * c.matrix()).trace();
    assert!((best - closed).abs() <= 1e-10 * closed.max(1.0), "{best} vs {closed}");

    for _ in 0..100 {
        let dk = gauss_matrix(&mut rng, d, n) * rng.random_range(1e-4..1.0);
        assert!(marginal_mse_of_linear(&(&k + dk), &c, &v, &x).unwrap() >= best * (1.0 - 1e-12));
    }
}

#[test]
fn oracle_weights_minimize_conditional_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, d) = (5, 3);
    let x = gauss_matrix(&mut rng, n, d);
    let theta = gauss_vector(&mut rng, d);
    let v = psd(&mut rng, n, n, 0.1);
    // With C = theta theta^T the marginal MSE is the MSE conditional on theta.
    let point = PsdMatrix::outer(&theta, 1.0).unwrap();
    for alpha in [0.01, 1.0, 100.0] {
        let w = oracle_mse_weights(&theta, &v, alpha).unwrap();
        let k = weighted_gain(&w, &x).unwrap();
        let best = marginal_mse_of_linear(&k, &point, &v, &x).unwrap();
        for _ in 0..100 {
            let dk = gauss_matrix(&mut rng, d, n) * rng.random_range(1e-4..1.0);
            assert!(marginal_mse_of_linear(&(&k + dk), &point, &v, &x).unwrap() >= best * (1.0 - 1e-12));
        }
    }
}

#[test]
fn oracle_nmse_for_identity_design() {
    for v in [0.01, 0.5, 1.0, 4.0] {
        let value = oracle_nmse(
            &DMatrix::identity(3, 3),
            &PsdMatrix::identity(3),
            &PsdMatrix::scaled_identity(3, v).unwrap(),
        )
        .unwrap();
        assert!((value - v / (1.0 + v)).abs() < 1e-14);
    }
}

#[test]
fn prior_draws_have_the_prior_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let d = 4;
    let c = psd(&mut rng, d, 3, 0.0);
    let x = gauss_matrix(&mut rng, 2, d);
    let v = PsdMatrix::identity(2);
    let draws = 100_000;
    let mut sum = DMatrix::zeros(d, d);
    for _ in 0..draws {
        let (theta, _) = sample_trial(&x, &c, &v, &mut rng).unwrap();
        sum += &theta * theta.transpose();
    }
    let sample = sum / draws as f64;
    let cm = c.matrix();
    for i in 0..d {
        for j in 0..d {
            let se = ((cm[(i, i)] * cm[(j, j)] + cm[(i, j)].powi(2)) / draws as f64).sqrt();
            assert!((sample[(i, j)] - cm[(i, j)]).abs() <= 5.0 * se, "entry ({i}, {j})");
        }
    }
}

#[test]
fn monte_carlo_lmmse_matches_oracle() {
    let case = ExperimentCase::new(2, 10, 8, 5);
    let g = generate_case(&case).unwrap();
    let oracle = oracle_nmse(&g.x, &g.c_prior, &g.v_noise).unwrap();
    let k = weighted_gain(&WeightPair::new(g.c_prior.clone(), g.v_noise.clone()), &g.x).unwrap();
    let tr_c = g.c_prior.trace();
    let trials = 10_000;
    let errors: Vec<f64> = (0..trials)
        .map(|t| {
            let (theta, y) = sample_trial(&g.x, &g.c_prior, &g.v_noise, &mut case.trial_rng(t)).unwrap();
            (&k * y - theta).norm_squared() / tr_c
        })
        .collect();
    let mean = errors.iter().sum::<f64>() / trials as f64;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    let se = (var / trials as f64).sqrt();
    assert!((mean - oracle).abs() <= 3.0 * se, "{mean} vs {oracle} (se {se})");

    // The library estimator agrees with the gain on one draw.
    let (_, y) = sample_trial(&g.x, &g.c_prior, &g.v_noise, &mut case.trial_rng(0)).unwrap();
    let data = Dataset::new(g.x.clone(), y.clone()).unwrap();
    let theta = lmmse(&g.c_prior, &g.v_noise, &data).unwrap().theta;
    assert!((theta - &k * y).norm() < 1e-10);
}

#[test]
fn nmse_curve_endpoints() {
    let case = ExperimentCase::new(1, 24, 8, 9);
    let g = generate_case(&case).unwrap();
    let trials = 20;
    let curve = nmse_curve(
        &case,
        CovStructure::ScaledIdentity,
        CovStructure::ScaledIdentity,
        &[0.0, 1e3],
        trials,
        &SolverOptions::precise(),
    )
    .unwrap();
    assert_eq!(curve.failed_trials, 0);
    let pinv = g.x.clone().pseudo_inverse(1e-12).unwrap();
    let tr_c = g.c_prior.trace();
    let (mut ls, mut zero) = (0.0, 0.0);
    for t in 0..trials {
        let (theta, y) = sample_trial(&g.x, &g.c_prior, &g.v_noise, &mut case.trial_rng(t)).unwrap();
        ls += (&pinv * y - &theta).norm_squared() / tr_c;
        zero += theta.norm_squared() / tr_c;
    }
    ls /= trials as f64;
    zero /= trials as f64;
    // No penalty: least squares. Huge penalty: the zero estimate.
    let (at_zero, _) = curve.at(0.0).unwrap();
    let (at_large, _) = curve.at(1e3).unwrap();
    assert!((at_zero - ls).abs() <= 1e-6 * ls, "{at_zero} vs {ls}");
    assert!((at_large - zero).abs() <= 1e-6 * zero, "{at_large} vs {zero}");
}
