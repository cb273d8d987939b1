mod common;

use cdkf_core::filter::forward_filter;
use cdkf_core::model::{ModelParams, TimedObservations};
use cdkf_core::smoother::{rts_smoother, two_filter_smoother, SmoothedMoments};
use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn instance(seed: u64, n: usize, m: usize, steps: usize) -> (ModelParams, TimedObservations) {
    let mut r = rng(seed);
    let params = random_model(&mut r, n, m);
    let taus = random_taus(&mut r, steps - 1, 0.01, 2.0);
    let data = random_data(&mut r, &params, &taus);
    (params, data)
}

fn worst_gap(a: &SmoothedMoments, b: &SmoothedMoments) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..a.len() {
        worst = worst.max(rel_err_vec(&a.mu_s[k], &b.mu_s[k]));
        worst = worst.max(rel_err(&a.p_s[k], &b.p_s[k]));
        worst = worst.max(rel_err(&a.exx[k], &b.exx[k]));
    }
    for k in 0..a.exx_prev.len() {
        worst = worst.max(rel_err(&a.exx_prev[k], &b.exx_prev[k]));
    }
    worst
}

#[test]
fn filter_matches_dense_conditioning() {
    for (seed, n, m, steps) in [(1, 1, 1, 12), (2, 2, 3, 10), (3, 3, 3, 8), (4, 2, 1, 15)] {
        let (params, data) = instance(seed, n, m, steps);
        let oracle = DenseOracle::new(&params, &data);
        let pass = forward_filter(&params, &data).unwrap();
        for k in 0..steps {
            let (mu_f, p_f) = oracle.filtered(k);
            let (mu_p, p_p) = oracle.predicted(k);
            let s = &pass.steps[k];
            assert!(rel_err_vec(&s.mu_post, &mu_f) < 1e-9, "seed {seed} step {k}");
            assert!(rel_err(&s.p_post, &p_f) < 1e-9, "seed {seed} step {k}");
            assert!(rel_err_vec(&s.mu_prior, &mu_p) < 1e-9, "seed {seed} step {k}");
            assert!(rel_err(&s.p_prior, &p_p) < 1e-9, "seed {seed} step {k}");
        }
    }
}

#[test]
fn log_likelihood_matches_dense_marginal() {
    let (params, data) = instance(5, 2, 2, 9);
    let pass = forward_filter(&params, &data).unwrap();
    // ln N(z; Hμ, H Σ Hᵀ + R) from the joint, one observation at a time
    let oracle = DenseOracle::new(&params, &data);
    let mut want = 0.0;
    for k in 0..data.len() {
        let (mu, p) = oracle.predicted(k);
        let s = &params.h * p * params.h.transpose() + &params.r;
        let e = data.z(k) - &params.h * mu;
        let quad = e.dot(&s.clone().lu().solve(&e).unwrap());
        want += -0.5 * (2.0 * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + quad);
    }
    assert!((pass.log_likelihood() - want).abs() < 1e-9 * want.abs());
}

#[test]
fn smoothers_match_dense_conditioning() {
    for (seed, n, m, steps) in [(6, 1, 1, 10), (7, 2, 2, 12), (8, 3, 4, 9), (9, 4, 4, 7)] {
        let (params, data) = instance(seed, n, m, steps);
        let oracle = DenseOracle::new(&params, &data);
        let (mus, covs, lag) = oracle.smoothed();
        let pass = forward_filter(&params, &data).unwrap();
        let (two, back) = two_filter_smoother(&params, &data, &pass).unwrap();
        let rts = rts_smoother(&pass).unwrap();
        for sm in [&two, &rts] {
            for k in 0..steps {
                assert!(rel_err_vec(&sm.mu_s[k], &mus[k]) < 1e-8, "seed {seed} step {k}");
                assert!(rel_err(&sm.p_s[k], &covs[k]) < 1e-8, "seed {seed} step {k}");
            }
            for k in 0..steps - 1 {
                assert!(rel_err(&sm.exx_prev[k], &lag[k]) < 1e-8, "seed {seed} lag {k}");
            }
        }
        for k in 0..steps - 1 {
            let (mu_b, p_b) = oracle.backward(k);
            assert!(rel_err(&back.steps[k].p_b, &p_b) < 1e-7, "seed {seed} backward {k}");
            assert!(rel_err_vec(&back.steps[k].mu_b, &mu_b) < 1e-7, "seed {seed} backward {k}");
        }
    }
}

#[test]
fn two_filter_equals_rts_on_random_models() {
    let mut r = rng(100);
    for i in 0..20 {
        let n = r.random_range(1..=4);
        let m = r.random_range(n..=4);
        let steps = r.random_range(5..=50);
        let (params, data) = instance(1000 + i, n, m, steps);
        let pass = forward_filter(&params, &data).unwrap();
        let (two, _) = two_filter_smoother(&params, &data, &pass).unwrap();
        let rts = rts_smoother(&pass).unwrap();
        assert!(worst_gap(&two, &rts) < 1e-8, "instance {i}: {}", worst_gap(&two, &rts));
    }
}

#[test]
fn rank_deficient_observation_matrix_is_refused() {
    let (params, data) = instance(12, 3, 2, 10);
    let pass = forward_filter(&params, &data).unwrap();
    assert!(two_filter_smoother(&params, &data, &pass).unwrap_err().is_numerical());
    let mut repeated = params.clone();
    repeated.h = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, -1.0, -2.0]);
    repeated.a = DMatrix::identity(2, 2) * -0.5;
    repeated.qc = DMatrix::identity(2, 2);
    repeated.mu0 = DVector::zeros(2);
    repeated.p0 = DMatrix::identity(2, 2);
    repeated.r = DMatrix::identity(3, 3);
    let data =
        TimedObservations::new(vec![0.0, 0.5, 1.5], DMatrix::from_fn(3, 3, |i, j| (i + j) as f64 * 0.1)).unwrap();
    let pass = forward_filter(&repeated, &data).unwrap();
    assert!(two_filter_smoother(&repeated, &data, &pass).is_err());
    assert!(rts_smoother(&pass).is_ok());
}

#[test]
fn single_observation_smoother_is_filter() {
    let (params, _) = instance(10, 2, 2, 5);
    let data = TimedObservations::new(vec![0.0], DMatrix::from_row_slice(1, 2, &[0.3, -1.0])).unwrap();
    let pass = forward_filter(&params, &data).unwrap();
    let (two, back) = two_filter_smoother(&params, &data, &pass).unwrap();
    assert!(back.steps.is_empty());
    assert_eq!(two.mu_s[0], pass.steps[0].mu_post);
    assert_eq!(two.p_s[0], pass.steps[0].p_post);
    assert!(two.exx_prev.is_empty());
}

#[test]
fn mismatched_observation_width_is_rejected() {
    let (params, _) = instance(11, 2, 3, 5);
    let data = TimedObservations::new(vec![0.0, 1.0], DMatrix::zeros(2, 2)).unwrap();
    assert!(forward_filter(&params, &data).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn smoothing_never_inflates_covariance(seed in any::<u64>(), n in 1usize..4, extra in 0usize..3, steps in 3usize..20) {
        let (params, data) = instance(seed, n, n + extra, steps);
        let pass = forward_filter(&params, &data).unwrap();
        let (two, _) = two_filter_smoother(&params, &data, &pass).unwrap();
        for k in 0..steps {
            let p = &two.p_s[k];
            prop_assert!((p - p.transpose()).norm() <= 1e-12 * p.norm());
            prop_assert!(p.clone().symmetric_eigen().eigenvalues.min() > 0.0);
            // P^s ≤ P^f in the Loewner order
            let gap = &pass.steps[k].p_post - p;
            prop_assert!(gap.symmetric_eigen().eigenvalues.min() > -1e-9 * pass.steps[k].p_post.norm());
            let second = &two.exx[k] - &two.mu_s[k] * two.mu_s[k].transpose();
            prop_assert!((second - p).norm() <= 1e-10 * two.exx[k].norm().max(1.0));
        }
        let ll: DVector<f64> = DVector::from_iterator(steps, pass.steps.iter().map(|s| s.loglik));
        prop_assert!(ll.iter().all(|v| v.is_finite()));
    }
}
