//! M-step updates and the continuous-discrete EM loop.
//!
//! Moments come from [`crate::smoother`]; in this module `M_k = E[x_{k−1}x_{k−1}ᵀ]`,
//! `C_k = E[x_k x_{k−1}ᵀ]` and `E_k = E[x_k x_kᵀ]` for each gap `τ_k` (0-based
//! gap `i` joins steps `i` and `i + 1`).
//!
//! The dynamics objective is the trace misfit
//! `J(A) = Σ tr[(E_k − F C_kᵀ − C_k Fᵀ + F M_k Fᵀ) Q_k^{-1}]` with `F = e^{Aτ_k}`
//! and `Q_k` held fixed. [`grad_a`] returns the log-density gradient, which is
//! `−½ ∇J`; the Newton-CG refinement minimizes `J` directly.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{forward_filter, FilterPass};
use crate::kernels::{
    build_ap, chol_logdet, ensure_pd, expm, expm_frechet, noise_covariance_q, phi1, spectral_radius, symmetrize,
    unvech_raw, vech_unchecked,
};
use crate::model::{ModelParams, TimedObservations};
use crate::simulate::rng_from_seed;
use crate::smoother::{rts_smoother, two_filter_smoother, SmoothedMoments};

/// Parameter names usable in [`EMOptions::fixed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Param {
    A,
    Qc,
    H,
    R,
    #[serde(rename = "mu0")]
    Mu0,
    P0,
}

impl Param {
    pub const ALL: [Param; 6] = [Param::A, Param::Qc, Param::H, Param::R, Param::Mu0, Param::P0];

    pub fn name(self) -> &'static str {
        match self {
            Param::A => "A",
            Param::Qc => "Qc",
            Param::H => "H",
            Param::R => "R",
            Param::Mu0 => "mu0",
            Param::P0 => "P0",
        }
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Param {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Param::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown parameter name {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmootherKind {
    #[default]
    TwoFilter,
    Rts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EMOptions {
    /// Stop once `|logL_i − logL_{i−1}| < tol`.
    pub tol: f64,
    pub max_iters: usize,
    pub refine_a: bool,
    /// Try the commuting `A` update; it is only taken when the commutator test passes.
    pub assume_commuting: bool,
    pub diagonal_qc: bool,
    pub fixed: BTreeSet<Param>,
    pub smoother: SmootherKind,
    /// Accept an `A` or `Q_c` update only if it does not lower the expected
    /// complete-data log-likelihood, backtracking toward the old value otherwise.
    pub safeguard: bool,
}

impl Default for EMOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 100,
            refine_a: true,
            assume_commuting: true,
            diagonal_qc: false,
            fixed: BTreeSet::new(),
            smoother: SmootherKind::TwoFilter,
            safeguard: true,
        }
    }
}

impl EMOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::invalid(format!("tol must be finite and > 0, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        Ok(())
    }

    fn learns(&self, p: Param) -> bool {
        !self.fixed.contains(&p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EMReport {
    /// Parameters after the last completed iteration (the input when none completed).
    pub params: ModelParams,
    pub iterates: Vec<ModelParams>,
    /// Log-likelihood of the initial parameters.
    pub initial_loglik: f64,
    /// `loglik_trace[i]` is the log-likelihood after iteration `i + 1`.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Iterations whose log-likelihood dropped by more than `1e−6`.
    pub monotonicity_violations: usize,
    pub warnings: Vec<String>,
    pub failure: Option<String>,
}

impl EMReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

fn gaps(moments: &SmoothedMoments, taus: &[f64]) -> Result<usize> {
    let n_steps = moments.len();
    if n_steps < 2 {
        return Err(Error::invalid("M-step needs at least two time steps"));
    }
    if taus.len() != n_steps - 1 || moments.exx_prev.len() != n_steps - 1 {
        return Err(Error::invalid(format!(
            "{} gaps and {} cross moments for {n_steps} steps",
            taus.len(),
            moments.exx_prev.len()
        )));
    }
    Ok(n_steps - 1)
}

/// `X = Num · Den^{-1}` through an LU solve of `Denᵀ Xᵀ = Numᵀ`.
fn solve_right(num: &DMatrix<f64>, den: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sol =
        den.transpose().lu().solve(&num.transpose()).filter(|x| x.iter().all(|v| v.is_finite())).ok_or_else(|| {
            Error::Numerical(format!("{what}: singular normal matrix; more data or regularization is needed"))
        })?;
    Ok(sol.transpose())
}

/// `E[(x_k − F x_{k−1})(x_k − F x_{k−1})ᵀ] = E_k − F C_kᵀ − C_k Fᵀ + F M_k Fᵀ`.
pub fn residual_moment(f: &DMatrix<f64>, m: &DMatrix<f64>, c: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
    let fct = f * c.transpose();
    symmetrize(&(e - &fct - fct.transpose() + f * m * f.transpose()))
}

/// Mixed second-order least-squares update
/// `A = (Σ τ tr(M)(C − M)) (Σ τ² tr(M) M)^{-1}`.
pub fn update_a_lsq(moments: &SmoothedMoments, taus: &[f64]) -> Result<DMatrix<f64>> {
    let gaps = gaps(moments, taus)?;
    let n = moments.exx[0].nrows();
    let mut num = DMatrix::zeros(n, n);
    let mut den = DMatrix::zeros(n, n);
    for ((m, c), &tau) in moments.exx.iter().zip(&moments.exx_prev).zip(&taus[..gaps]) {
        let tr = m.trace();
        num += (c - m) * (tau * tr);
        den += m * (tau * tau * tr);
    }
    solve_right(&num, &den, "least-squares A update")
}

/// `‖[A, Q]‖_F ≤ 1e−10 ‖A‖_F ‖Q‖_F`
pub fn commutes(a: &DMatrix<f64>, q: &DMatrix<f64>) -> bool {
    let comm = a * q - q * a;
    comm.norm() <= 1e-10 * a.norm() * q.norm()
}

fn factor_all(qtaus: &[DMatrix<f64>]) -> Result<Vec<Cholesky<f64, Dyn>>> {
    qtaus
        .iter()
        .enumerate()
        .map(|(i, q)| {
            symmetrize(q)
                .cholesky()
                .ok_or_else(|| Error::at(i + 2, "transition covariance Q(τ) is not positive definite"))
        })
        .collect()
}

/// Update for `A` commuting with every `Q(τ_k)`:
/// `A = (Σ Q_k^{-1}(C − M)) (Σ τ Q_k^{-1} M)^{-1}`.
///
/// The commutator test runs against `a_prev`; when it fails the least-squares
/// update is returned together with a warning.
pub fn update_a_commuting(
    moments: &SmoothedMoments,
    taus: &[f64],
    qtaus: &[DMatrix<f64>],
    a_prev: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, Option<String>)> {
    let gaps = gaps(moments, taus)?;
    if qtaus.len() != gaps {
        return Err(Error::invalid("one Q(τ) per gap is required"));
    }
    if !qtaus.iter().all(|q| commutes(a_prev, q)) {
        let warning = "A and Q(τ) do not commute; using the least-squares A update".to_string();
        return Ok((update_a_lsq(moments, taus)?, Some(warning)));
    }
    let chols = factor_all(qtaus)?;
    let n = a_prev.nrows();
    let mut num = DMatrix::zeros(n, n);
    let mut den = DMatrix::zeros(n, n);
    for i in 0..gaps {
        let (m, c) = (&moments.exx[i], &moments.exx_prev[i]);
        num += chols[i].solve(&(c - m));
        den += chols[i].solve(m) * taus[i];
    }
    Ok((solve_right(&num, &den, "commuting A update")?, None))
}

/// Misfit `J(A)` and its gradient with `Q(τ_k)` held fixed.
struct DynamicsObjective<'a> {
    moments: &'a SmoothedMoments,
    taus: &'a [f64],
    chols: Vec<Cholesky<f64, Dyn>>,
}

impl<'a> DynamicsObjective<'a> {
    fn new(moments: &'a SmoothedMoments, taus: &'a [f64], qtaus: &[DMatrix<f64>]) -> Result<Self> {
        let gaps = gaps(moments, taus)?;
        if qtaus.len() != gaps {
            return Err(Error::invalid("one Q(τ) per gap is required"));
        }
        Ok(Self { moments, taus, chols: factor_all(qtaus)? })
    }

    fn value(&self, a: &DMatrix<f64>) -> Result<f64> {
        let mut total = 0.0;
        for (i, chol) in self.chols.iter().enumerate() {
            let f = expm(a, self.taus[i])?;
            let z = residual_moment(&f, &self.moments.exx[i], &self.moments.exx_prev[i], &self.moments.exx[i + 1]);
            total += chol.solve(&z).trace();
        }
        Ok(total)
    }

    /// `Σ τ L(Aᵀτ, V_k)`, `V_k = Q_k^{-1}(C_k − e^{Aτ} M_k)`.
    fn log_density_gradient(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let at = a.transpose();
        let mut g = DMatrix::zeros(a.nrows(), a.ncols());
        for (i, chol) in self.chols.iter().enumerate() {
            let tau = self.taus[i];
            let v = self.direction(a, i, chol)?;
            let (_, l) = expm_frechet(&(&at * tau), &v)?;
            g += l * tau;
        }
        Ok(g)
    }

    fn direction(&self, a: &DMatrix<f64>, i: usize, chol: &Cholesky<f64, Dyn>) -> Result<DMatrix<f64>> {
        let f = expm(a, self.taus[i])?;
        Ok(chol.solve(&(&self.moments.exx_prev[i] - f * &self.moments.exx[i])))
    }

    fn misfit_gradient(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.log_density_gradient(a)? * -2.0)
    }

    /// Size of the individual gradient terms before cancellation.
    fn gradient_scale(&self) -> f64 {
        self.chols
            .iter()
            .enumerate()
            .map(|(i, chol)| 2.0 * self.taus[i] * chol.solve(&self.moments.exx_prev[i]).norm())
            .sum()
    }
}

/// Trace misfit `J(A)`; smaller is better.
pub fn expected_loglik_a(
    a: &DMatrix<f64>,
    moments: &SmoothedMoments,
    taus: &[f64],
    qtaus: &[DMatrix<f64>],
) -> Result<f64> {
    DynamicsObjective::new(moments, taus, qtaus)?.value(a)
}

/// Expected log-density gradient `Σ_k τ_k ∫₀¹ e^{Aᵀτ_k(1−s)} V_k e^{Aᵀτ_k s} ds`
/// evaluated with the Fréchet derivative of the exponential. Equals `−½ ∇J`.
pub fn grad_a(
    a: &DMatrix<f64>,
    moments: &SmoothedMoments,
    taus: &[f64],
    qtaus: &[DMatrix<f64>],
) -> Result<DMatrix<f64>> {
    DynamicsObjective::new(moments, taus, qtaus)?.log_density_gradient(a)
}

/// Power-series form of [`grad_a`]:
/// `Σ_k Σ_{r=0}^{terms} Σ_{j=0}^{r} τ^{r+1}/(r+1)! (Aᵀ)^j V_k (Aᵀ)^{r−j}`.
pub fn grad_a_series(
    a: &DMatrix<f64>,
    moments: &SmoothedMoments,
    taus: &[f64],
    qtaus: &[DMatrix<f64>],
    terms: usize,
) -> Result<DMatrix<f64>> {
    let obj = DynamicsObjective::new(moments, taus, qtaus)?;
    let n = a.nrows();
    let at = a.transpose();
    let mut powers = vec![DMatrix::<f64>::identity(n, n)];
    for j in 1..=terms {
        powers.push(&powers[j - 1] * &at);
    }
    let mut g = DMatrix::zeros(n, n);
    for (i, chol) in obj.chols.iter().enumerate() {
        let tau = taus[i];
        let v = obj.direction(a, i, chol)?;
        let mut coeff = tau;
        for r in 0..=terms {
            if r > 0 {
                coeff *= tau / (r + 1) as f64;
            }
            for j in 0..=r {
                g += &powers[j] * &v * &powers[r - j] * coeff;
            }
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSettings {
    /// Stop once `‖∇J‖_F ≤ grad_tol · max(1, s)` with `s` the size of the gradient terms.
    pub grad_tol: f64,
    pub max_iters: usize,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self { grad_tol: 1e-8, max_iters: 50, armijo: 1e-4, max_backtracks: 40 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOutcome {
    pub a: DMatrix<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub warning: Option<String>,
}

fn frob(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    x.dot(y)
}

/// Truncated Newton-CG on the trace misfit `J(A)`, `Q(τ_k)` fixed.
///
/// Hessian-vector products are central differences of the gradient with
/// `h = 1e−6 (1 + ‖A‖_F)`; CG runs at most `n²` steps and stops early on
/// negative curvature. The step is accepted by Armijo backtracking.
pub fn refine_a_newton_cg(
    a0: &DMatrix<f64>,
    moments: &SmoothedMoments,
    taus: &[f64],
    qtaus: &[DMatrix<f64>],
    settings: &NewtonSettings,
) -> Result<NewtonOutcome> {
    let obj = DynamicsObjective::new(moments, taus, qtaus)?;
    let n = a0.nrows();
    let stop = settings.grad_tol * obj.gradient_scale().max(1.0);
    let mut a = a0.clone();
    let mut value = obj.value(&a)?;
    let mut grad = obj.misfit_gradient(&a)?;

    for iter in 0..settings.max_iters {
        let gnorm = grad.norm();
        if gnorm <= stop {
            return Ok(NewtonOutcome { a, objective: value, iterations: iter, converged: true, warning: None });
        }

        let h = 1e-6 * (1.0 + a.norm());
        let hess_vec = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            let pn = p.norm();
            let unit = p / pn;
            let plus = obj.misfit_gradient(&(&a + &unit * h))?;
            let minus = obj.misfit_gradient(&(&a - &unit * h))?;
            Ok((plus - minus) * (pn / (2.0 * h)))
        };

        let mut step = DMatrix::<f64>::zeros(n, n);
        let mut r = -&grad;
        let mut p = r.clone();
        let mut rr = frob(&r, &r);
        let forcing = gnorm.sqrt().min(0.5) * gnorm;
        for j in 0..n * n {
            let hp = hess_vec(&p)?;
            let curv = frob(&p, &hp);
            if curv <= 0.0 {
                if j == 0 {
                    step = -&grad;
                }
                break;
            }
            let alpha = rr / curv;
            step += &p * alpha;
            r -= &hp * alpha;
            let rr_next = frob(&r, &r);
            if rr_next.sqrt() <= forcing {
                break;
            }
            p = &r + &p * (rr_next / rr);
            rr = rr_next;
        }

        let mut slope = frob(&grad, &step);
        if !(slope < 0.0) {
            step = -&grad;
            slope = -gnorm * gnorm;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..settings.max_backtracks {
            let trial = &a + &step * t;
            if let Ok(v) = obj.value(&trial) {
                if v.is_finite() && v <= value + settings.armijo * t * slope {
                    accepted = Some((trial, v));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((trial, v)) => {
                a = trial;
                value = v;
                grad = obj.misfit_gradient(&a)?;
            }
            None => {
                return Ok(NewtonOutcome {
                    a,
                    objective: value,
                    iterations: iter,
                    converged: false,
                    warning: Some(format!(
                        "Newton-CG line search failed after {iter} iterations (gradient norm {gnorm:.3e})"
                    )),
                });
            }
        }
    }
    let converged = grad.norm() <= stop;
    let warning = (!converged)
        .then(|| format!("Newton-CG reached {} iterations (gradient norm {:.3e})", settings.max_iters, grad.norm()));
    Ok(NewtonOutcome { a, objective: value, iterations: settings.max_iters, converged, warning })
}

/// Per-gap estimates `φ₁(A_P, τ_k)^{-1} vech E[Z_k]`, before averaging.
fn qc_blocks(a: &DMatrix<f64>, moments: &SmoothedMoments, taus: &[f64]) -> Result<Vec<(DMatrix<f64>, DVector<f64>)>> {
    let gaps = gaps(moments, taus)?;
    let ap = build_ap(a)?;
    (0..gaps)
        .map(|i| {
            let f = expm(a, taus[i])?;
            let z = residual_moment(&f, &moments.exx[i], &moments.exx_prev[i], &moments.exx[i + 1]);
            Ok((phi1(&ap, taus[i])?, vech_unchecked(&z)))
        })
        .collect()
}

/// Closed-form diffusion update before projection:
/// `vech Q_c = (N−1)^{-1} Σ φ₁(A_P, τ_k)^{-1} vech E[Z_k]`, solved per gap.
pub fn update_qc_unprojected(a: &DMatrix<f64>, moments: &SmoothedMoments, taus: &[f64]) -> Result<DMatrix<f64>> {
    let blocks = qc_blocks(a, moments, taus)?;
    let d = blocks[0].1.len();
    let mut acc = DVector::zeros(d);
    for (i, (phi, z)) in blocks.iter().enumerate() {
        let sol =
            phi.clone().lu().solve(z).ok_or_else(|| Error::at(i + 2, "integrated Lyapunov operator is singular"))?;
        acc += sol;
    }
    acc /= blocks.len() as f64;
    Ok(symmetrize(&unvech_raw(&acc, a.nrows())))
}

/// [`update_qc_unprojected`] followed by projection onto the positive-definite cone.
pub fn update_qc(a: &DMatrix<f64>, moments: &SmoothedMoments, taus: &[f64]) -> Result<DMatrix<f64>> {
    Ok(ensure_pd(&update_qc_unprojected(a, moments, taus)?).0)
}

/// Least-norm solution of the stacked system `F̃ vech Q_c = Z̃` with blocks
/// `φ₁(A_P, τ_k)` and `vech E[Z_k]`, projected onto the positive-definite cone.
pub fn update_qc_normal_equations(a: &DMatrix<f64>, moments: &SmoothedMoments, taus: &[f64]) -> Result<DMatrix<f64>> {
    let blocks = qc_blocks(a, moments, taus)?;
    let d = blocks[0].1.len();
    let rows = d * blocks.len();
    let mut f = DMatrix::zeros(rows, d);
    let mut z = DVector::zeros(rows);
    for (i, (phi, zi)) in blocks.iter().enumerate() {
        f.view_mut((i * d, 0), (d, d)).copy_from(phi);
        z.rows_mut(i * d, d).copy_from(zi);
    }
    let svd = f.svd(true, true);
    let eps = svd.singular_values.max() * 1e-12 * rows as f64;
    let sol = svd.solve(&z, eps).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(ensure_pd(&unvech_raw(&sol, a.nrows())).0)
}

/// Zero the off-diagonal entries.
pub fn apply_diagonal_constraint(qc: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&qc.diagonal())
}

/// `H = (Σ z_k E[x_k]ᵀ)(Σ E[x_k x_kᵀ])^{-1}`
pub fn update_h(moments: &SmoothedMoments, data: &TimedObservations) -> Result<DMatrix<f64>> {
    let n = moments.exx[0].nrows();
    let mut num = DMatrix::zeros(data.obs_dim(), n);
    let mut den = DMatrix::zeros(n, n);
    for k in 0..moments.len() {
        num += data.z(k) * moments.mu_s[k].transpose();
        den += &moments.exx[k];
    }
    solve_right(&num, &den, "H update")
}

fn r_unprojected(moments: &SmoothedMoments, data: &TimedObservations, h: &DMatrix<f64>) -> DMatrix<f64> {
    let m = h.nrows();
    let mut acc = DMatrix::zeros(m, m);
    for k in 0..moments.len() {
        let z = data.z(k);
        let hmz = h * &moments.mu_s[k] * z.transpose();
        acc += &z * z.transpose() - &hmz - hmz.transpose() + h * &moments.exx[k] * h.transpose();
    }
    symmetrize(&(acc / moments.len() as f64))
}

/// `R = N^{-1} Σ E[(z_k − H x_k)(z_k − H x_k)ᵀ]`, projected to positive definite.
pub fn update_r(moments: &SmoothedMoments, data: &TimedObservations, h: &DMatrix<f64>) -> DMatrix<f64> {
    ensure_pd(&r_unprojected(moments, data, h)).0
}

pub fn update_mu0(moments: &SmoothedMoments) -> DVector<f64> {
    moments.mu_s[0].clone()
}

/// `P₀ = E[x₁x₁ᵀ] − μ₀μ₀ᵀ`, projected to positive definite.
pub fn update_p0(moments: &SmoothedMoments, mu0: &DVector<f64>) -> DMatrix<f64> {
    ensure_pd(&(&moments.exx[0] - mu0 * mu0.transpose())).0
}

fn gaussian_term(cov: &DMatrix<f64>, second: &DMatrix<f64>, step: usize) -> Result<f64> {
    let chol = symmetrize(cov).cholesky().ok_or_else(|| Error::at(step, "covariance is not positive definite"))?;
    let d = cov.nrows() as f64;
    Ok(-0.5 * (d * (2.0 * PI).ln() + chol_logdet(&chol) + chol.solve(second).trace()))
}

/// Expected complete-data log-likelihood `E[ln p(x_{1:N}, z_{1:N} | Θ)]` under `moments`.
pub fn expected_complete_loglik(
    params: &ModelParams,
    data: &TimedObservations,
    moments: &SmoothedMoments,
) -> Result<f64> {
    let gaps = gaps(moments, data.taus()).or_else(|e| if moments.len() == 1 { Ok(0) } else { Err(e) })?;
    let mu_x = &moments.mu_s[0];
    let cross = mu_x * params.mu0.transpose();
    let init = symmetrize(&(&moments.exx[0] - &cross - cross.transpose() + &params.mu0 * params.mu0.transpose()));
    let mut total = gaussian_term(&params.p0, &init, 1)?;
    for i in 0..gaps {
        let tau = data.taus()[i];
        let f = expm(&params.a, tau)?;
        let q = noise_covariance_q(&params.a, &params.qc, tau)?;
        let z = residual_moment(&f, &moments.exx[i], &moments.exx_prev[i], &moments.exx[i + 1]);
        total += gaussian_term(&q, &z, i + 2)?;
    }
    let r_second = r_unprojected(moments, data, &params.h) * moments.len() as f64;
    let chol = symmetrize(&params.r).cholesky().ok_or_else(|| Error::invalid("R is not positive definite"))?;
    let m = params.obs_dim() as f64;
    total += -0.5 * (moments.len() as f64 * (m * (2.0 * PI).ln() + chol_logdet(&chol)) + chol.solve(&r_second).trace());
    Ok(total)
}

/// Walk from `current` toward `candidate` until the expected complete-data
/// log-likelihood is no lower than at `current`.
fn guarded_update(
    current: &DMatrix<f64>,
    candidate: DMatrix<f64>,
    base: f64,
    mut eval: impl FnMut(&DMatrix<f64>) -> Result<f64>,
) -> (DMatrix<f64>, Option<f64>) {
    let slack = 1e-12 * (1.0 + base.abs());
    let mut t = 1.0;
    for _ in 0..12 {
        let trial = if t == 1.0 { candidate.clone() } else { current + (&candidate - current) * t };
        if let Ok(v) = eval(&trial) {
            if v.is_finite() && v >= base - slack {
                return (trial, Some(t));
            }
        }
        t *= 0.5;
    }
    (current.clone(), None)
}

fn smoothed_moments(
    params: &ModelParams,
    data: &TimedObservations,
    pass: &FilterPass,
    kind: SmootherKind,
    warnings: &mut Vec<String>,
) -> Result<SmoothedMoments> {
    match kind {
        SmootherKind::Rts => rts_smoother(pass),
        SmootherKind::TwoFilter => match two_filter_smoother(params, data, pass) {
            Ok((moments, back)) => {
                if back.init_repaired {
                    warnings.push("backward initialization needed a positive-definite repair".into());
                }
                Ok(moments)
            }
            Err(e) => {
                warnings.push(format!("two-filter smoother failed ({e}); using RTS"));
                rts_smoother(pass)
            }
        },
    }
}

/// One E-step and M-step from the filter pass of `params`.
fn em_iteration(
    params: &ModelParams,
    data: &TimedObservations,
    pass: &FilterPass,
    opts: &EMOptions,
    warnings: &mut Vec<String>,
) -> Result<ModelParams> {
    let moments = smoothed_moments(params, data, pass, opts.smoother, warnings)?;
    let taus = data.taus();
    let mut next = params.clone();

    if opts.learns(Param::Mu0) {
        next.mu0 = update_mu0(&moments);
    }
    if opts.learns(Param::P0) {
        let (p0, repaired) = ensure_pd(&(&moments.exx[0] - &next.mu0 * next.mu0.transpose()));
        if repaired {
            warnings.push("P0 update was projected to positive definite".into());
        }
        next.p0 = p0;
    }

    if opts.learns(Param::A) {
        let qtaus: Vec<DMatrix<f64>> = pass.transitions.iter().map(|t| t.q.clone()).collect();
        let closed = if opts.assume_commuting {
            update_a_commuting(&moments, taus, &qtaus, &params.a).map(|(a, w)| {
                warnings.extend(w);
                a
            })
        } else {
            update_a_lsq(&moments, taus)
        };
        let candidate = match (closed, opts.refine_a) {
            (Ok(a), false) => a,
            (closed, true) => {
                let obj = DynamicsObjective::new(&moments, taus, &qtaus)?;
                let prev_value = obj.value(&params.a)?;
                let start = match closed {
                    Ok(a) if obj.value(&a).is_ok_and(|v| v.is_finite() && v < prev_value) => a,
                    Ok(_) => params.a.clone(),
                    Err(e) => {
                        warnings.push(format!("{e}; refining from the previous A"));
                        params.a.clone()
                    }
                };
                let out = refine_a_newton_cg(&start, &moments, taus, &qtaus, &NewtonSettings::default())?;
                warnings.extend(out.warning);
                out.a
            }
            (Err(e), false) => return Err(e),
        };
        next.a = if opts.safeguard {
            let base = expected_complete_loglik(&next, data, &moments)?;
            let mut probe = next.clone();
            let (a, t) = guarded_update(&params.a, candidate, base, |a| {
                probe.a = a.clone();
                expected_complete_loglik(&probe, data, &moments)
            });
            if t.is_none() {
                warnings.push("A update rejected by the likelihood safeguard".into());
            }
            a
        } else {
            candidate
        };
    }

    if opts.learns(Param::Qc) {
        let mut raw = update_qc_unprojected(&next.a, &moments, taus)?;
        if opts.diagonal_qc {
            raw = apply_diagonal_constraint(&raw);
        }
        let (candidate, repaired) = ensure_pd(&raw);
        if repaired {
            warnings.push("Qc update was projected to positive definite".into());
        }
        next.qc = if opts.safeguard {
            let base = expected_complete_loglik(&next, data, &moments)?;
            let mut probe = next.clone();
            let (qc, t) = guarded_update(&params.qc, candidate, base, |qc| {
                probe.qc = qc.clone();
                expected_complete_loglik(&probe, data, &moments)
            });
            if t.is_none() {
                warnings.push("Qc update rejected by the likelihood safeguard".into());
            }
            qc
        } else {
            candidate
        };
    }

    if opts.learns(Param::H) {
        next.h = update_h(&moments, data)?;
    }
    if opts.learns(Param::R) {
        let (r, repaired) = ensure_pd(&r_unprojected(&moments, data, &next.h));
        if repaired {
            warnings.push("R update was projected to positive definite".into());
        }
        next.r = r;
    }
    Ok(next)
}

/// Continuous-discrete EM. Input errors are returned as `Err`; numerical
/// failures during the iterations end the run and are reported in
/// [`EMReport::failure`] alongside everything computed so far.
pub fn run_em(params0: &ModelParams, data: &TimedObservations, opts: &EMOptions) -> Result<EMReport> {
    let params0 = params0.clone().validated()?;
    opts.validate()?;
    if data.len() < 2 {
        return Err(Error::invalid("EM needs at least two observations"));
    }
    if data.obs_dim() != params0.obs_dim() {
        return Err(Error::invalid(format!(
            "data has {} observation columns but H has {} rows",
            data.obs_dim(),
            params0.obs_dim()
        )));
    }

    let mut report = EMReport {
        params: params0.clone(),
        iterates: Vec::new(),
        initial_loglik: f64::NAN,
        loglik_trace: Vec::new(),
        converged: false,
        iterations: 0,
        monotonicity_violations: 0,
        warnings: Vec::new(),
        failure: None,
    };
    let mut pass = match forward_filter(&params0, data) {
        Ok(p) => p,
        Err(e) => {
            report.failure = Some(e.to_string());
            return Ok(report);
        }
    };
    report.initial_loglik = pass.log_likelihood();
    let mut prev = report.initial_loglik;
    let mut params = params0;

    for _ in 0..opts.max_iters {
        let step = em_iteration(&params, data, &pass, opts, &mut report.warnings)
            .and_then(|next| forward_filter(&next, data).map(|p| (next, p)));
        let (next, next_pass) = match step {
            Ok(v) => v,
            Err(e) => {
                report.failure = Some(e.to_string());
                break;
            }
        };
        let ll = next_pass.log_likelihood();
        if ll < prev - 1e-6 {
            report.monotonicity_violations += 1;
        }
        report.iterates.push(next.clone());
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
    report.warnings = collapse_warnings(std::mem::take(&mut report.warnings));
    Ok(report)
}

/// Keeps the first occurrence of each message, suffixed with its count when repeated.
fn collapse_warnings(raw: Vec<String>) -> Vec<String> {
    let mut order: Vec<(String, usize)> = Vec::new();
    for w in raw {
        match order.iter_mut().find(|(m, _)| *m == w) {
            Some((_, count)) => *count += 1,
            None => order.push((w, 1)),
        }
    }
    order.into_iter().map(|(m, count)| if count == 1 { m } else { format!("{m} (x{count})") }).collect()
}

/// Default starting point: `A` has entries `N(0, 0.1²)` shifted by
/// `−(0.5 + ρ)·I` (ρ the spectral radius of the random part) and `Q_c` is the
/// identity scaled by the mean sample variance of first differences over the
/// mean gap. The remaining parameters come from `template`.
pub fn default_init(template: &ModelParams, data: &TimedObservations, seed: u64) -> Result<ModelParams> {
    let n = template.state_dim();
    let mut rng = rng_from_seed(seed);
    let noise = DMatrix::from_fn(n, n, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
    let rho = spectral_radius(&noise);
    let a = &noise - DMatrix::identity(n, n) * (0.5 + rho);

    let obs = data.observations();
    let mut scale = 0.0;
    if data.len() >= 3 {
        let diffs = obs.rows(1, data.len() - 1) - obs.rows(0, data.len() - 1);
        let cols = diffs.ncols();
        for col in diffs.column_iter() {
            let mean = col.mean();
            scale += col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64 / cols as f64;
        }
        scale /= data.taus().iter().sum::<f64>() / data.taus().len() as f64;
    }
    if !(scale.is_finite() && scale > 0.0) {
        scale = 1.0;
    }
    let params = ModelParams { a, qc: DMatrix::identity(n, n) * scale, ..template.clone() };
    params.validated()
}
