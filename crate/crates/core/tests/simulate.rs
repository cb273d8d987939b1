mod common;

use cdkf_core::model::{ModelParams, TimedObservations};
use cdkf_core::simulate::{
    beta_steps, sample_trajectory, times_from_taus, toggle_switch_dynamics, uniform_breaks, ToggleRates,
};
use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn ou(a: f64, qc: f64) -> ModelParams {
    ModelParams {
        a: DMatrix::from_element(1, 1, a),
        qc: DMatrix::from_element(1, 1, qc),
        h: DMatrix::from_element(1, 1, 1.0),
        r: DMatrix::from_element(1, 1, 1e-12),
        mu0: DVector::zeros(1),
        p0: DMatrix::from_element(1, 1, qc / (-2.0 * a)),
    }
}

#[test]
fn stationary_ou_moments() {
    // Var = q/(2|a|), lag-τ correlation e^{aτ}
    let (a, qc, tau) = (-0.5, 2.0, 0.3);
    let params = ou(a, qc);
    let times = times_from_taus(&vec![tau; 40_000]);
    let traj = sample_trajectory(&params, &times, 1).unwrap();
    let x: Vec<f64> = traj.latent.column(0).iter().copied().collect();
    let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    assert!((var - 2.0).abs() < 0.1, "{var}");
    let lag = x.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / (x.len() - 1) as f64;
    assert!((lag / var - (a * tau).exp()).abs() < 0.02);
}

#[test]
fn trajectory_is_reproducible_and_seed_sensitive() {
    let mut r = rng(1);
    let params = random_model(&mut r, 2, 3);
    let times = times_of(&random_taus(&mut r, 20, 0.1, 1.0));
    let one = sample_trajectory(&params, &times, 9).unwrap();
    assert_eq!(one, sample_trajectory(&params, &times, 9).unwrap());
    assert_ne!(one.observed, sample_trajectory(&params, &times, 10).unwrap().observed);
    assert_eq!(one.latent.shape(), (21, 2));
    assert_eq!(one.observed.shape(), (21, 3));
}

#[test]
fn csv_round_trip_keeps_observations() {
    let mut r = rng(2);
    let params = random_model(&mut r, 2, 2);
    let times = times_of(&random_taus(&mut r, 10, 0.1, 1.0));
    let traj = sample_trajectory(&params, &times, 3).unwrap();
    let mut buf = Vec::new();
    traj.write_csv(&mut buf, true).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("t,z1,z2,x1,x2\n"));
    let back = TimedObservations::from_csv_reader(buf.as_slice()).unwrap();
    assert_eq!(back.times(), traj.times.as_slice());
    assert_eq!(back.observations(), &traj.observed);
}

#[test]
fn invalid_times_and_covariances() {
    let params = ou(-1.0, 1.0);
    assert!(sample_trajectory(&params, &[], 0).is_err());
    assert!(sample_trajectory(&params, &[0.0, 1.0, 1.0], 0).is_err());
    let mut bad = params.clone();
    bad.r[(0, 0)] = -1.0;
    assert!(sample_trajectory(&bad, &[0.0, 1.0], 0).is_err());
}

#[test]
fn toggle_dynamics_signs_and_validation() {
    let rates = ToggleRates::default();
    let (a, b) = toggle_switch_dynamics(&rates).unwrap();
    assert!(a[(0, 0)] < 0.0 && a[(0, 1)] < 0.0 && a[(1, 0)] < 0.0);
    assert!(max_real_eig(&a) < 0.0);
    assert!(b[(0, 1)] == 0.0 && b[(0, 0)] > 0.0 && b[(1, 1)] > 0.0);
    let bad = ToggleRates { omega: 0.5, ..rates };
    assert!(toggle_switch_dynamics(&bad).is_err());
}

#[test]
fn beta_step_moments() {
    // Beta(γ, γ): mean 1/2, variance 1/(4(2γ + 1))
    for gamma in [0.5, 2.0, 50.0] {
        let s = beta_steps(gamma, 200_000, 0.5, 4).unwrap();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64;
        assert!((mean - 0.25).abs() < 2e-3, "gamma {gamma}: mean {mean}");
        let want = 0.25 / (4.0 * (2.0 * gamma + 1.0));
        assert!((var - want).abs() < 0.02 * want, "gamma {gamma}: var {var} vs {want}");
    }
}

proptest! {
    #[test]
    fn uniform_breaks_partition_the_interval(total in 0.5..200.0f64, n in 2usize..300, seed in any::<u64>()) {
        let taus = uniform_breaks(total, n, seed).unwrap();
        prop_assert_eq!(taus.len(), n);
        prop_assert!(taus.iter().all(|&t| t > 0.0));
        prop_assert!((taus.iter().sum::<f64>() - total).abs() < 1e-9 * total * n as f64);
        prop_assert_eq!(uniform_breaks(total, n, seed).unwrap(), taus);
    }

    #[test]
    fn beta_steps_stay_in_range(gamma in 0.05..1e4f64, n in 1usize..200, scale in 0.01..10.0f64, seed in any::<u64>()) {
        let taus = beta_steps(gamma, n, scale, seed).unwrap();
        prop_assert_eq!(taus.len(), n);
        prop_assert!(taus.iter().all(|&t| t > 0.0 && t <= scale));
    }

    #[test]
    fn times_are_cumulative(taus in prop::collection::vec(1e-3..5.0f64, 1..50)) {
        let t = times_from_taus(&taus);
        prop_assert_eq!(t.len(), taus.len());
        prop_assert!(t.windows(2).all(|w| w[1] > w[0]));
        prop_assert!((t.last().unwrap() - taus.iter().sum::<f64>()).abs() < 1e-12 * t.last().unwrap());
    }
}
