//! Classical discrete-time EM with a constant one-step map `x_k = F x_{k−1} + w`,
//! `w ~ N(0, Q)`. Timestamps are never consulted.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::em::{residual_moment, update_h, update_mu0, EMOptions, Param};
use crate::error::{Error, Result};
use crate::filter::{filter_with_transitions, FilterPass};
use crate::kernels::{ensure_pd, expm, noise_covariance_q};
use crate::model::{DiscretizedStep, ModelParams, TimedObservations};
use crate::smoother::{rts_smoother, SmoothedMoments};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteParams {
    #[serde(with = "crate::model::rows")]
    pub f: DMatrix<f64>,
    #[serde(with = "crate::model::rows")]
    pub q: DMatrix<f64>,
    #[serde(with = "crate::model::rows")]
    pub h: DMatrix<f64>,
    #[serde(with = "crate::model::rows")]
    pub r: DMatrix<f64>,
    #[serde(with = "crate::model::vector")]
    pub mu0: DVector<f64>,
    #[serde(with = "crate::model::rows")]
    pub p0: DMatrix<f64>,
}

impl DiscreteParams {
    /// The one-step model implied by `params` at a constant gap `tau`.
    pub fn from_continuous(params: &ModelParams, tau: f64) -> Result<Self> {
        Ok(Self {
            f: expm(&params.a, tau)?,
            q: noise_covariance_q(&params.a, &params.qc, tau)?,
            h: params.h.clone(),
            r: params.r.clone(),
            mu0: params.mu0.clone(),
            p0: params.p0.clone(),
        })
    }

    /// Same fields viewed as a continuous model; only `H`, `R`, `μ₀`, `P₀` are meaningful.
    fn observation_part(&self) -> ModelParams {
        ModelParams {
            a: self.f.clone(),
            qc: self.q.clone(),
            h: self.h.clone(),
            r: self.r.clone(),
            mu0: self.mu0.clone(),
            p0: self.p0.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.f.nrows();
        let m = self.h.nrows();
        let shapes_ok = self.f.is_square()
            && self.q.shape() == (n, n)
            && self.h.ncols() == n
            && self.r.shape() == (m, m)
            && self.mu0.len() == n
            && self.p0.shape() == (n, n);
        if !shapes_ok {
            return Err(Error::invalid("discrete parameters have inconsistent shapes"));
        }
        for (name, s) in [("Q", &self.q), ("R", &self.r), ("P0", &self.p0)] {
            if s.clone().cholesky().is_none() {
                return Err(Error::Validation(vec![format!("{name} not positive definite")]));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteReport {
    pub params: DiscreteParams,
    pub initial_loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub failure: Option<String>,
}

fn discrete_filter(params: &DiscreteParams, obs: &DMatrix<f64>) -> Result<FilterPass> {
    let step = DiscretizedStep { f: params.f.clone(), q: params.q.clone() };
    let transitions = vec![step; obs.nrows().saturating_sub(1)];
    filter_with_transitions(&params.observation_part(), obs, transitions)
}

fn m_step(
    params: &DiscreteParams,
    moments: &SmoothedMoments,
    data: &TimedObservations,
    opts: &EMOptions,
) -> Result<DiscreteParams> {
    let learns = |p: Param| !opts.fixed.contains(&p);
    let n = params.f.nrows();
    let gaps = moments.len() - 1;
    let mut next = params.clone();
    if learns(Param::Mu0) {
        next.mu0 = update_mu0(moments);
    }
    if learns(Param::P0) {
        next.p0 = ensure_pd(&(&moments.exx[0] - &next.mu0 * next.mu0.transpose())).0;
    }
    if learns(Param::A) {
        let mut num = DMatrix::zeros(n, n);
        let mut den = DMatrix::zeros(n, n);
        for i in 0..gaps {
            num += &moments.exx_prev[i];
            den += &moments.exx[i];
        }
        next.f = den
            .transpose()
            .lu()
            .solve(&num.transpose())
            .ok_or_else(|| Error::Numerical("F update: singular second-moment sum".into()))?
            .transpose();
    }
    if learns(Param::Qc) {
        let mut acc = DMatrix::zeros(n, n);
        for i in 0..gaps {
            acc += residual_moment(&next.f, &moments.exx[i], &moments.exx_prev[i], &moments.exx[i + 1]);
        }
        next.q = ensure_pd(&(acc / gaps as f64)).0;
    }
    if learns(Param::H) {
        next.h = update_h(moments, data)?;
    }
    if learns(Param::R) {
        next.r = crate::em::update_r(moments, data, &next.h);
    }
    Ok(next)
}

/// Discrete-time EM on the rows of `obs`. The fixed set reuses [`Param`]:
/// `A` stands for `F` and `Qc` for `Q`. Only `tol`, `max_iters` and `fixed`
/// are read from `opts`.
pub fn discrete_em(params0: &DiscreteParams, obs: &DMatrix<f64>, opts: &EMOptions) -> Result<DiscreteReport> {
    params0.validate()?;
    opts.validate()?;
    if obs.nrows() < 2 {
        return Err(Error::invalid("EM needs at least two observations"));
    }
    if obs.ncols() != params0.h.nrows() {
        return Err(Error::invalid("observation width does not match H"));
    }
    // unit spacing; the filter never reads the times
    let data = TimedObservations::new((0..obs.nrows()).map(|k| k as f64).collect(), obs.clone())?;

    let mut report = DiscreteReport {
        params: params0.clone(),
        initial_loglik: f64::NAN,
        loglik_trace: Vec::new(),
        converged: false,
        iterations: 0,
        failure: None,
    };
    let mut pass = match discrete_filter(params0, obs) {
        Ok(p) => p,
        Err(e) => {
            report.failure = Some(e.to_string());
            return Ok(report);
        }
    };
    report.initial_loglik = pass.log_likelihood();
    let mut prev = report.initial_loglik;
    let mut params = params0.clone();
    for _ in 0..opts.max_iters {
        let step = rts_smoother(&pass)
            .and_then(|moments| m_step(&params, &moments, &data, opts))
            .and_then(|next| discrete_filter(&next, obs).map(|p| (next, p)));
        let (next, next_pass) = match step {
            Ok(v) => v,
            Err(e) => {
                report.failure = Some(e.to_string());
                break;
            }
        };
        let ll = next_pass.log_likelihood();
        report.loglik_trace.push(ll);
        report.iterations += 1;
        params = next;
        pass = next_pass;
        if (ll - prev).abs() < opts.tol {
            report.converged = true;
            break;
        }
        prev = ll;
    }
    report.params = params;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> DiscreteParams {
        DiscreteParams {
            f: DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.1, 0.8]),
            q: DMatrix::identity(2, 2) * 0.2,
            h: DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
            r: DMatrix::from_element(1, 1, 0.3),
            mu0: DVector::zeros(2),
            p0: DMatrix::identity(2, 2),
        }
    }

    #[test]
    fn huge_tol_single_iteration() {
        let obs = DMatrix::from_fn(30, 1, |i, _| ((i as f64) * 0.7).sin());
        let opts = EMOptions { tol: 1e300, ..Default::default() };
        let rep = discrete_em(&toy(), &obs, &opts).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
    }

    #[test]
    fn fixed_parameters_stay_put() {
        let obs = DMatrix::from_fn(25, 1, |i, _| ((i as f64) * 0.3).cos());
        let opts = EMOptions {
            max_iters: 5,
            fixed: [Param::A, Param::H, Param::R].into_iter().collect(),
            ..Default::default()
        };
        let rep = discrete_em(&toy(), &obs, &opts).unwrap();
        assert_eq!(rep.params.f, toy().f);
        assert_eq!(rep.params.h, toy().h);
        assert_ne!(rep.params.q, toy().q);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut p = toy();
        p.q = DMatrix::identity(3, 3);
        assert!(discrete_em(&p, &DMatrix::zeros(5, 1), &EMOptions::default()).is_err());
    }
}
