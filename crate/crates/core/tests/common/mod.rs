#![allow(dead_code)]

use cdkf_core::model::{ModelParams, TimedObservations};
use cdkf_core::smoother::SmoothedMoments;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let g = gaussian(rng, n, n);
    &g * g.transpose() / n as f64 + DMatrix::identity(n, n) * floor
}

pub fn max_real_eig(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max)
}

pub fn radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Random `A` whose eigenvalues have real part at most `-decay`.
pub fn stable(rng: &mut ChaCha8Rng, n: usize, decay: f64) -> DMatrix<f64> {
    let g = gaussian(rng, n, n) * 0.6;
    let shift = max_real_eig(&g) + decay;
    g - DMatrix::identity(n, n) * shift
}

pub fn random_model(rng: &mut ChaCha8Rng, n: usize, m: usize) -> ModelParams {
    let decay = 0.1 + 0.5 * rng.random::<f64>();
    ModelParams {
        a: stable(rng, n, decay),
        qc: spd(rng, n, 0.1),
        h: gaussian(rng, m, n),
        r: spd(rng, m, 0.2),
        mu0: DVector::from_fn(n, |_, _| rng.sample(StandardNormal)),
        p0: spd(rng, n, 0.3),
    }
}

pub fn random_taus(rng: &mut ChaCha8Rng, count: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..count).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn times_of(taus: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0];
    for tau in taus {
        t.push(t.last().unwrap() + tau);
    }
    t
}

pub fn random_data(rng: &mut ChaCha8Rng, params: &ModelParams, taus: &[f64]) -> TimedObservations {
    let seed = rng.random();
    let traj = cdkf_core::simulate::sample_trajectory(params, &times_of(taus), seed).unwrap();
    traj.observations().unwrap()
}

/// Scaling and squaring around a 30-term Taylor series.
pub fn expm_taylor(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.norm();
    let squarings = if norm > 0.25 { (norm / 0.25).log2().ceil() as i32 } else { 0 };
    let b = a / 2f64.powi(squarings);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..=30 {
        term = &term * &b / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

fn simpson<F: Fn(f64) -> DMatrix<f64>>(
    f: &F,
    (a, b): (f64, f64),
    (fa, fm, fb): (&DMatrix<f64>, &DMatrix<f64>, &DMatrix<f64>),
    whole: &DMatrix<f64>,
    tol: f64,
    depth: u32,
) -> DMatrix<f64> {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (fa + &flm * 4.0 + fm) * ((m - a) / 6.0);
    let right = (fm + &frm * 4.0 + fb) * ((b - m) / 6.0);
    let diff = &left + &right - whole;
    if depth == 0 || diff.norm() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    simpson(f, (a, m), (fa, &flm, fm), &left, 0.5 * tol, depth - 1)
        + simpson(f, (m, b), (fm, &frm, fb), &right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson quadrature of a matrix-valued integrand.
pub fn integrate<F: Fn(f64) -> DMatrix<f64>>(f: F, a: f64, b: f64, tol: f64) -> DMatrix<f64> {
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (&fa + &fm * 4.0 + &fb) * ((b - a) / 6.0);
    simpson(&f, (a, b), (&fa, &fm, &fb), &whole, tol, 40)
}

/// `∫₀^τ e^{As} Q_c e^{Aᵀs} ds` by quadrature.
pub fn q_quadrature(a: &DMatrix<f64>, qc: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let scale = qc.norm() * tau * expm_taylor(&(a * tau)).norm().max(1.0).powi(2);
    integrate(
        |s| {
            let e = expm_taylor(&(a * s));
            &e * qc * e.transpose()
        },
        0.0,
        tau,
        1e-14 * scale,
    )
}

pub fn rel_err(x: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    (x - reference).norm() / reference.norm().max(x.norm()).max(1e-300)
}

pub fn rel_err_vec(x: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    (x - reference).norm() / reference.norm().max(x.norm()).max(1e-300)
}

/// Second moments of a zero-mean chain `x_k = F_k x_{k−1} + w_k`, `Cov w_k = Q_k`,
/// started at `E[x_1 x_1ᵀ] = m0`. `mu_s` is zero and `p_s` equals `exx`.
pub fn exact_moments(f: &[DMatrix<f64>], q: &[DMatrix<f64>], m0: &DMatrix<f64>) -> SmoothedMoments {
    let n = m0.nrows();
    let mut exx = vec![m0.clone()];
    let mut exx_prev = Vec::new();
    for (fk, qk) in f.iter().zip(q) {
        let m = exx.last().unwrap().clone();
        exx_prev.push(fk * &m);
        exx.push(fk * &m * fk.transpose() + qk);
    }
    SmoothedMoments { mu_s: vec![DVector::zeros(n); exx.len()], p_s: exx.clone(), exx, exx_prev }
}

fn block(m: &DMatrix<f64>, i: usize, j: usize, n: usize) -> DMatrix<f64> {
    m.view((i * n, j * n), (n, n)).into_owned()
}

/// Joint Gaussian over `(x_1, …, x_N)` built densely from Taylor exponentials
/// and quadrature noise, conditioned on observation prefixes.
pub struct DenseOracle {
    n: usize,
    m: usize,
    steps: usize,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    hb: DMatrix<f64>,
    rb: DMatrix<f64>,
    z: DVector<f64>,
    trans: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    h: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl DenseOracle {
    pub fn new(params: &ModelParams, data: &TimedObservations) -> Self {
        let n = params.state_dim();
        let m = params.obs_dim();
        let steps = data.len();
        let trans: Vec<_> = data
            .taus()
            .iter()
            .map(|&tau| (expm_taylor(&(&params.a * tau)), q_quadrature(&params.a, &params.qc, tau)))
            .collect();

        let mut mean = DVector::zeros(n * steps);
        let mut cov = DMatrix::zeros(n * steps, n * steps);
        mean.rows_mut(0, n).copy_from(&params.mu0);
        cov.view_mut((0, 0), (n, n)).copy_from(&params.p0);
        for i in 1..steps {
            let (f, q) = &trans[i - 1];
            let prev_mean = mean.rows((i - 1) * n, n).into_owned();
            mean.rows_mut(i * n, n).copy_from(&(f * prev_mean));
            for j in 0..i {
                let c = f * block(&cov, i - 1, j, n);
                cov.view_mut((i * n, j * n), (n, n)).copy_from(&c);
                cov.view_mut((j * n, i * n), (n, n)).copy_from(&c.transpose());
            }
            let d = f * block(&cov, i - 1, i - 1, n) * f.transpose() + q;
            cov.view_mut((i * n, i * n), (n, n)).copy_from(&d);
        }

        let mut hb = DMatrix::zeros(m * steps, n * steps);
        let mut rb = DMatrix::zeros(m * steps, m * steps);
        for k in 0..steps {
            hb.view_mut((k * m, k * n), (m, n)).copy_from(&params.h);
            rb.view_mut((k * m, k * m), (m, m)).copy_from(&params.r);
        }
        let z =
            DVector::from_iterator(m * steps, (0..steps).flat_map(|k| data.z(k).iter().copied().collect::<Vec<_>>()));
        Self { n, m, steps, mean, cov, hb, rb, z, trans, h: params.h.clone(), r: params.r.clone() }
    }

    /// Mean and covariance of all states given the first `k` observations.
    pub fn posterior(&self, k: usize) -> (DVector<f64>, DMatrix<f64>) {
        if k == 0 {
            return (self.mean.clone(), self.cov.clone());
        }
        let rows = k * self.m;
        let hk = self.hb.rows(0, rows).into_owned();
        let s = &hk * &self.cov * hk.transpose() + self.rb.view((0, 0), (rows, rows));
        let cross = &self.cov * hk.transpose();
        let resid = self.z.rows(0, rows) - &hk * &self.mean;
        let lu = s.lu();
        let mean = &self.mean + &cross * lu.solve(&resid).unwrap();
        let cov = &self.cov - &cross * lu.solve(&cross.transpose()).unwrap();
        (mean, cov)
    }

    pub fn marginal(&self, post: &(DVector<f64>, DMatrix<f64>), k: usize) -> (DVector<f64>, DMatrix<f64>) {
        (post.0.rows(k * self.n, self.n).into_owned(), block(&post.1, k, k, self.n))
    }

    /// `(μ_k^+, P_k^+)`, 0-based.
    pub fn filtered(&self, k: usize) -> (DVector<f64>, DMatrix<f64>) {
        self.marginal(&self.posterior(k + 1), k)
    }

    /// `(μ_k^−, P_k^−)`, 0-based.
    pub fn predicted(&self, k: usize) -> (DVector<f64>, DMatrix<f64>) {
        self.marginal(&self.posterior(k), k)
    }

    /// Smoothed means, covariances and lag-one second moments `E[x_k x_{k−1}ᵀ]`.
    pub fn smoothed(&self) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let post = self.posterior(self.steps);
        let n = self.n;
        let mus: Vec<_> = (0..self.steps).map(|k| post.0.rows(k * n, n).into_owned()).collect();
        let covs: Vec<_> = (0..self.steps).map(|k| block(&post.1, k, k, n)).collect();
        let lag = (1..self.steps).map(|k| block(&post.1, k, k - 1, n) + &mus[k] * mus[k - 1].transpose()).collect();
        (mus, covs, lag)
    }

    /// Likelihood of `z_{k+1..N}` (0-based) as a Gaussian in `x_k`: `(μ_k^b, P_k^b)`.
    /// Needs `H` of full column rank.
    pub fn backward(&self, k: usize) -> (DVector<f64>, DMatrix<f64>) {
        let (n, m) = (self.n, self.m);
        let ahead = self.steps - 1 - k;
        let mut g = DMatrix::zeros(m * ahead, n);
        let mut noise = DMatrix::zeros(n * ahead, n * ahead);
        let mut prop = DMatrix::identity(n, n);
        let mut marg = DMatrix::zeros(n, n);
        for i in 0..ahead {
            let (f, q) = &self.trans[k + i];
            prop = f * prop;
            g.view_mut((i * m, 0), (m, n)).copy_from(&(&self.h * &prop));
            for j in 0..i {
                let c = f * block(&noise, i - 1, j, n);
                noise.view_mut((i * n, j * n), (n, n)).copy_from(&c);
                noise.view_mut((j * n, i * n), (n, n)).copy_from(&c.transpose());
            }
            marg = f * marg * f.transpose() + q;
            noise.view_mut((i * n, i * n), (n, n)).copy_from(&marg);
        }
        let mut hb = DMatrix::zeros(m * ahead, n * ahead);
        let mut rb = DMatrix::zeros(m * ahead, m * ahead);
        for i in 0..ahead {
            hb.view_mut((i * m, i * n), (m, n)).copy_from(&self.h);
            rb.view_mut((i * m, i * m), (m, m)).copy_from(&self.r);
        }
        let s = &hb * noise * hb.transpose() + rb;
        let lu = s.lu();
        let sinv_g = lu.solve(&g).unwrap();
        let info = g.transpose() * &sinv_g;
        let p_b = info.try_inverse().unwrap();
        let zf = self.z.rows((k + 1) * m, m * ahead).into_owned();
        let mu_b = &p_b * (sinv_g.transpose() * zf);
        (mu_b, p_b)
    }
}
