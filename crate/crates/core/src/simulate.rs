//! Exact sampling from the linear SDE, the linearized toggle-switch model
//! and the step-size samplers used by the experiments.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::symmetrize;
use crate::model::{discretize, write_series_csv, ModelParams};

/// Seeded generator used everywhere a replicate needs randomness.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rate constants of the two-repressor toggle switch, linearized at `(r1, r2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToggleRates {
    /// Mean mRNA transcription rate (nM/min).
    pub alpha_m: f64,
    /// Inverse mean protein lifetime (1/min).
    pub beta_p: f64,
    /// Repressor-promoter dissociation constant (nM).
    pub k_r: f64,
    /// Fold change of regulation.
    pub omega: f64,
    /// Promoter parameter `α_p/β_m` (nM).
    pub b: f64,
    /// Equilibrium repressor levels (nM).
    pub r1: f64,
    pub r2: f64,
}

impl Default for ToggleRates {
    fn default() -> Self {
        Self {
            alpha_m: 1.0 / 5.0,
            beta_p: 1.0 / 50.0,
            k_r: 5.0,
            omega: 200.0,
            b: 10.0,
            r1: 11.0 / 5.0,
            r2: 341.0 / 5.0,
        }
    }
}

impl ToggleRates {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_m, self.beta_p, self.k_r, self.omega, self.b, self.r1, self.r2];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("toggle rates must all be finite and positive"));
        }
        if self.omega <= 1.0 {
            return Err(Error::invalid("toggle fold change omega must exceed 1"));
        }
        Ok(())
    }

    pub fn equilibrium(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.r1, self.r2])
    }
}

/// Promoter activity `g_R(r) = (1 + (q/ω)(2 + q)) / (1 + q)²` with `q = r/(2K_R)`.
pub fn promoter_activity(r: f64, k_r: f64, omega: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::invalid(format!("repressor level must be >= 0, got {r}")));
    }
    let q = r / (2.0 * k_r);
    Ok((1.0 + q / omega * (2.0 + q)) / ((1.0 + q) * (1.0 + q)))
}

/// `g′_R(r) = (8(1−ω)/ω) K_R² / (r + 2K_R)³`.
pub fn promoter_activity_deriv(r: f64, k_r: f64, omega: f64) -> f64 {
    let d = r + 2.0 * k_r;
    8.0 * (1.0 - omega) / omega * k_r * k_r / (d * d * d)
}

/// Linearized dynamics `A` and diagonal diffusion `B` of the toggle switch.
pub fn toggle_switch_dynamics(rates: &ToggleRates) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    rates.validate()?;
    let ToggleRates { alpha_m, beta_p, k_r, omega, b, r1, r2 } = *rates;
    let a = DMatrix::from_row_slice(
        2,
        2,
        &[
            -beta_p,
            b * alpha_m * promoter_activity_deriv(r2, k_r, omega),
            b * alpha_m * promoter_activity_deriv(r1, k_r, omega),
            -beta_p,
        ],
    );
    let g1 = promoter_activity(r1, k_r, omega)?;
    let g2 = promoter_activity(r2, k_r, omega)?;
    let diffusion = DMatrix::from_diagonal(&DVector::from_vec(vec![
        b * b * alpha_m * g2 + beta_p * r1,
        b * b * alpha_m * g1 + beta_p * r2,
    ]));
    Ok((a, diffusion))
}

/// Sampled latent path and its noisy observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `N × n`
    pub latent: DMatrix<f64>,
    /// `N × m`
    pub observed: DMatrix<f64>,
}

impl Trajectory {
    pub fn observations(&self) -> Result<crate::model::TimedObservations> {
        crate::model::TimedObservations::new(self.times.clone(), self.observed.clone())
    }

    pub fn write_csv<W: Write>(&self, writer: W, emit_latent: bool) -> Result<()> {
        write_series_csv(writer, &self.times, &self.observed, emit_latent.then_some(&self.latent))
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>, emit_latent: bool) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?, emit_latent)
    }
}

/// Factor `L` with `L Lᵀ = cov`. Semi-definite covariances (including zero)
/// fall back to a clamped eigen factor; indefinite ones are rejected.
fn gaussian_factor(cov: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = symmetrize(cov);
    if sym.iter().all(|v| *v == 0.0) {
        return Some(sym);
    }
    if let Some(ch) = sym.clone().cholesky() {
        return Some(ch.unpack());
    }
    let eig = sym.clone().symmetric_eigen();
    let floor = -1e-10 * sym.amax();
    if eig.eigenvalues.iter().any(|l| *l < floor) {
        return None;
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

fn standard_normal(rng: &mut impl Rng, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

/// Draws `x_1 ~ N(μ₀, P₀)`, `x_k = e^{Aτ_k} x_{k−1} + w_k`, `z_k = H x_k + v_k`.
pub fn sample_trajectory(params: &ModelParams, times: &[f64], seed: u64) -> Result<Trajectory> {
    if times.is_empty() {
        return Err(Error::invalid("at least one sample time is required"));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("sample times must be strictly increasing"));
    }
    let n = params.state_dim();
    let m = params.obs_dim();
    let mut rng = rng_from_seed(seed);

    let obs_factor = gaussian_factor(&params.r)
        .ok_or_else(|| Error::at(1, "observation covariance R is not positive semi-definite"))?;
    let init_factor = gaussian_factor(&params.p0)
        .ok_or_else(|| Error::at(1, "initial covariance P0 is not positive semi-definite"))?;

    let mut latent = DMatrix::zeros(times.len(), n);
    let mut observed = DMatrix::zeros(times.len(), m);
    let mut x = &params.mu0 + &init_factor * standard_normal(&mut rng, n);
    for k in 0..times.len() {
        if k > 0 {
            let step = discretize(&params.a, &params.qc, times[k] - times[k - 1]).map_err(|e| match e {
                Error::Numerical(reason) => Error::at(k + 1, reason),
                other => other,
            })?;
            let factor = gaussian_factor(&step.q)
                .ok_or_else(|| Error::at(k + 1, "step covariance Q(τ) is not positive semi-definite"))?;
            x = &step.f * &x + factor * standard_normal(&mut rng, n);
        }
        let z = &params.h * &x + &obs_factor * standard_normal(&mut rng, m);
        if x.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::at(k + 1, "sampled state is not finite"));
        }
        latent.set_row(k, &x.transpose());
        observed.set_row(k, &z.transpose());
    }
    Ok(Trajectory { times: times.to_vec(), latent, observed })
}

/// Splits `[0, T]` at `N − 1` sorted uniform points into `N` gaps.
pub fn uniform_breaks(total: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n < 2 || !(total > 0.0) {
        return Err(Error::invalid("uniform breaks need N >= 2 and T > 0"));
    }
    let mut rng = rng_from_seed(seed);
    let mut points: Vec<f64> = (0..n - 1).map(|_| rng.random_range(0.0..total)).collect();
    points.sort_by(f64::total_cmp);
    let mut taus = Vec::with_capacity(n);
    let mut prev = 0.0;
    for p in points {
        taus.push(p - prev);
        prev = p;
    }
    taus.push(total - prev);
    // a zero gap (repeated draw) would make the series non-increasing
    let floor = 1e-9 * total;
    for t in &mut taus {
        if *t < floor {
            *t = floor;
        }
    }
    Ok(taus)
}

/// `N` gaps `scale·β` with `β ~ Beta(γ, γ)`, drawn as `X/(X+Y)` for
/// independent `Gamma(γ, 1)` variates. Gaps below `1e-9·scale` are clamped.
pub fn beta_steps(gamma: f64, n: usize, scale: f64, seed: u64) -> Result<Vec<f64>> {
    if !(gamma > 0.0) || !(scale > 0.0) {
        return Err(Error::invalid("beta steps need gamma > 0 and scale > 0"));
    }
    let dist = Gamma::new(gamma, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng_from_seed(seed);
    let floor = 1e-9 * scale;
    Ok((0..n)
        .map(|_| {
            let x: f64 = rng.sample(dist);
            let y: f64 = rng.sample(dist);
            let beta = if x + y > 0.0 { x / (x + y) } else { 0.5 };
            (scale * beta).max(floor)
        })
        .collect())
}

/// Observation times `t_k = τ_1 + … + τ_k`.
pub fn times_from_taus(taus: &[f64]) -> Vec<f64> {
    taus.iter()
        .scan(0.0, |acc, t| {
            *acc += t;
            Some(*acc)
        })
        .collect()
}
