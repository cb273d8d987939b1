//! Forward continuous-discrete Kalman filter.
//!
//! Step 1 applies the measurement update directly to the prior `(μ₀, P₀)`;
//! every later step first propagates through the exact transition
//! `(e^{Aτ_k}, Q(τ_k))` of the gap `τ_k`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{chol_logdet, symmetrize};
use crate::model::{discretize, DiscretizedStep, ModelParams, TimedObservations};

/// Moments of one filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    pub mu_prior: DVector<f64>,
    pub p_prior: DMatrix<f64>,
    pub mu_post: DVector<f64>,
    pub p_post: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    /// `ln N(z_k | H μ_prior, H P_prior Hᵀ + R)`
    pub loglik: f64,
}

/// A complete forward pass. `transitions[i]` carries step `i` into `i + 1` (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPass {
    pub steps: Vec<FilterStep>,
    pub transitions: Vec<DiscretizedStep>,
}

impl FilterPass {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn log_likelihood(&self) -> f64 {
        log_likelihood(self)
    }
}

/// Sum of the per-step predictive log-densities.
pub fn log_likelihood(pass: &FilterPass) -> f64 {
    pass.steps.iter().map(|s| s.loglik).sum()
}

/// Exact transitions for every gap of `data` under `(A, Q_c)`.
pub fn transitions_for(a: &DMatrix<f64>, qc: &DMatrix<f64>, data: &TimedObservations) -> Result<Vec<DiscretizedStep>> {
    data.taus()
        .iter()
        .enumerate()
        .map(|(i, &tau)| {
            discretize(a, qc, tau).map_err(|e| match e {
                Error::Numerical(reason) => Error::at(i + 2, reason),
                other => other,
            })
        })
        .collect()
}

pub fn forward_filter(params: &ModelParams, data: &TimedObservations) -> Result<FilterPass> {
    if data.obs_dim() != params.obs_dim() {
        return Err(Error::invalid(format!(
            "data has {} observation columns but H has {} rows",
            data.obs_dim(),
            params.obs_dim()
        )));
    }
    let transitions = transitions_for(&params.a, &params.qc, data)?;
    filter_with_transitions(params, data.observations(), transitions)
}

/// Filter with precomputed transitions (`obs` is `N × m`, `transitions` has `N − 1` entries).
/// Only `H`, `R`, `μ₀` and `P₀` are read from `params`.
pub fn filter_with_transitions(
    params: &ModelParams,
    obs: &DMatrix<f64>,
    transitions: Vec<DiscretizedStep>,
) -> Result<FilterPass> {
    let n_obs = obs.nrows();
    if transitions.len() + 1 != n_obs {
        return Err(Error::invalid(format!("{} transitions for {n_obs} observations", transitions.len())));
    }
    let h = &params.h;
    let m = h.nrows();
    let ln_2pi = (2.0 * PI).ln();
    let mut steps: Vec<FilterStep> = Vec::with_capacity(n_obs);

    for k in 0..n_obs {
        let (mu_prior, p_prior) = match steps.last() {
            None => (params.mu0.clone(), symmetrize(&params.p0)),
            Some(prev) => {
                let tr = &transitions[k - 1];
                let mu = &tr.f * &prev.mu_post;
                let p = symmetrize(&(&tr.f * &prev.p_post * tr.f.transpose() + &tr.q));
                (mu, p)
            }
        };
        let z = obs.row(k).transpose();
        let innovation = &z - h * &mu_prior;
        let s = symmetrize(&(h * &p_prior * h.transpose() + &params.r));
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::at(k + 1, "innovation covariance H P Hᵀ + R is not positive definite"))?;
        let ph_t = &p_prior * h.transpose();
        let gain = chol.solve(&ph_t.transpose()).transpose();
        let mu_post = &mu_prior + &gain * &innovation;
        let p_post = symmetrize(&(&p_prior - &gain * ph_t.transpose()));
        let quad = innovation.dot(&chol.solve(&innovation));
        let loglik = -0.5 * (m as f64 * ln_2pi + chol_logdet(&chol) + quad);
        if !loglik.is_finite() {
            return Err(Error::at(k + 1, "non-finite log-likelihood term"));
        }
        steps.push(FilterStep { mu_prior, p_prior, mu_post, p_post, gain, loglik });
    }
    Ok(FilterPass { steps, transitions })
}
