//! Full-data posterior moments.
//!
//! Two routes are provided. [`rts_smoother`] is the usual Rauch-Tung-Striebel
//! back-substitution through the forward pass. The two-filter route runs a
//! backward likelihood recursion `N(x_k | μ_k^b, P_k^b) ∝ p(z_{k+1:N} | x_k)`
//! and fuses it with the forward posterior by precision addition. The
//! backward quantity at the last step is not defined without a final-state
//! prior, so the recursion starts at step `N − 1` from one RTS step
//! ([`backward_init`]). Both routes produce the same [`SmoothedMoments`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filter::FilterPass;
use crate::kernels::{ensure_pd, expm, symmetrize};
use crate::model::{ModelParams, TimedObservations};

/// Posterior moments under `p(x | z_{1:N})`; indices are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedMoments {
    pub mu_s: Vec<DVector<f64>>,
    pub p_s: Vec<DMatrix<f64>>,
    /// `E[x_k x_kᵀ]`
    pub exx: Vec<DMatrix<f64>>,
    /// `exx_prev[i] = E[x_{i+1} x_iᵀ]`, length `N − 1`.
    pub exx_prev: Vec<DMatrix<f64>>,
}

impl SmoothedMoments {
    pub fn len(&self) -> usize {
        self.mu_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_s.is_empty()
    }

    /// Builds second moments from smoothed means/covariances and the forward pass.
    fn assemble(pass: &FilterPass, mu_s: Vec<DVector<f64>>, p_s: Vec<DMatrix<f64>>) -> Result<Self> {
        let exx = mu_s.iter().zip(&p_s).map(|(mu, p)| p + mu * mu.transpose()).collect();
        let mut exx_prev = Vec::with_capacity(mu_s.len().saturating_sub(1));
        for k in 1..mu_s.len() {
            // P_k^s (P_k^{f/-})^{-1} e^{Aτ_k} P_{k-1}^{f/+} + μ_k^s (μ_{k-1}^s)ᵀ
            let prior = pass.steps[k]
                .p_prior
                .clone()
                .cholesky()
                .ok_or_else(|| Error::at(k + 1, "a-priori covariance is not positive definite"))?;
            let right = prior.solve(&(&pass.transitions[k - 1].f * &pass.steps[k - 1].p_post));
            exx_prev.push(&p_s[k] * right + &mu_s[k] * mu_s[k - 1].transpose());
        }
        Ok(Self { mu_s, p_s, exx, exx_prev })
    }
}

/// RTS gain `G_k = P_k^{f/+} F_{k+1}ᵀ (P_{k+1}^{f/−})^{-1}` and the smoothed step it produces.
fn rts_step(
    pass: &FilterPass,
    k: usize,
    mu_next: &DVector<f64>,
    p_next: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let cur = &pass.steps[k];
    let next = &pass.steps[k + 1];
    let f = &pass.transitions[k].f;
    let chol = next
        .p_prior
        .clone()
        .cholesky()
        .ok_or_else(|| Error::at(k + 2, "a-priori covariance is not positive definite"))?;
    let gain = chol.solve(&(f * &cur.p_post)).transpose();
    let mu = &cur.mu_post + &gain * (mu_next - &next.mu_prior);
    let p = symmetrize(&(&cur.p_post + &gain * (p_next - &next.p_prior) * gain.transpose()));
    Ok((mu, p))
}

pub fn rts_smoother(pass: &FilterPass) -> Result<SmoothedMoments> {
    let n_steps = pass.len();
    if n_steps == 0 {
        return Err(Error::invalid("empty filter pass"));
    }
    let last = &pass.steps[n_steps - 1];
    let mut mu_s = vec![DVector::zeros(0); n_steps];
    let mut p_s = vec![DMatrix::zeros(0, 0); n_steps];
    mu_s[n_steps - 1] = last.mu_post.clone();
    p_s[n_steps - 1] = last.p_post.clone();
    for k in (0..n_steps - 1).rev() {
        let (mu, p) = rts_step(pass, k, &mu_s[k + 1], &p_s[k + 1])?;
        mu_s[k] = mu;
        p_s[k] = p;
    }
    SmoothedMoments::assemble(pass, mu_s, p_s)
}

/// One step of the backward likelihood recursion (0-based index `k`).
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardStep {
    pub mu_b: DVector<f64>,
    pub p_b: DMatrix<f64>,
    /// Backward gain `W_{k+1}` used to produce this step; `None` at the initial step.
    pub gain: Option<DMatrix<f64>>,
}

/// Backward pass for steps `0 ..= N − 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPass {
    pub steps: Vec<BackwardStep>,
    /// Set when the initial information difference needed a PSD repair.
    pub init_repaired: bool,
}

/// Initialization at step `N − 1` (1-based) from the RTS-smoothed tail:
/// `P^b = ((P^s)^{-1} − (P^f)^{-1})^{-1}` and the mean that makes the fusion
/// reproduce `μ^s`. Evaluated as `P^b = P^f D^{-1} P^s`,
/// `μ^b = μ^f + P^f D^{-1}(μ^s − μ^f)` with `D = P^f − P^s`.
///
/// Returns `(P^b, μ^b, repaired)`; `repaired` reports that `D` had to be
/// projected onto the positive-definite cone.
pub fn backward_init(
    p_filtered: &DMatrix<f64>,
    mu_filtered: &DVector<f64>,
    p_smoothed: &DMatrix<f64>,
    mu_smoothed: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>, bool) {
    let (diff, repaired) = ensure_pd(&(p_filtered - p_smoothed));
    let chol = diff.cholesky().expect("ensure_pd returns a factorable matrix");
    let p_b = symmetrize(&(p_filtered * chol.solve(p_smoothed)));
    let mu_b = mu_filtered + p_filtered * chol.solve(&(mu_smoothed - mu_filtered));
    (p_b, mu_b, repaired)
}

/// Backward recursion from an initial `(P^b, μ^b)` at step `N − 1` down to step 1:
/// `W = P^b Hᵀ(H P^b Hᵀ + R)^{-1}`,
/// `P_k^b = e^{−Aτ}(Q(τ) + (I − W H) P_{k+1}^b) e^{−Aᵀτ}`,
/// `μ_k^b = e^{−Aτ}(μ_{k+1}^b + W(z_{k+1} − H μ_{k+1}^b))`, with `τ = τ_{k+1}`.
pub fn backward_pass(
    params: &ModelParams,
    data: &TimedObservations,
    pass: &FilterPass,
    init: (DMatrix<f64>, DVector<f64>, bool),
) -> Result<BackwardPass> {
    let n_steps = data.len();
    if n_steps < 2 {
        return Err(Error::invalid("backward pass needs at least two observations"));
    }
    let (p_init, mu_init, init_repaired) = init;
    let h = &params.h;
    let n = params.state_dim();
    let ident = DMatrix::<f64>::identity(n, n);

    let mut rev = Vec::with_capacity(n_steps - 1);
    rev.push(BackwardStep { mu_b: mu_init, p_b: p_init, gain: None });
    for k in (0..n_steps - 2).rev() {
        let next = rev.last().expect("initialized above");
        let s = symmetrize(&(h * &next.p_b * h.transpose() + &params.r));
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::at(k + 2, "backward innovation covariance H P Hᵀ + R is not positive definite"))?;
        let w = chol.solve(&(h * &next.p_b)).transpose();
        let back = expm(&params.a, -data.taus()[k])?;
        let q = &pass.transitions[k].q;
        let inner = q + (&ident - &w * h) * &next.p_b;
        let p_b = symmetrize(&(&back * inner * back.transpose()));
        let z = data.z(k + 1);
        let mu_b = &back * (&next.mu_b + &w * (z - h * &next.mu_b));
        rev.push(BackwardStep { mu_b, p_b, gain: Some(w) });
    }
    rev.reverse();
    Ok(BackwardPass { steps: rev, init_repaired })
}

/// Precision-weighted fusion of forward and backward passes:
/// `P^s = ((P^b)^{-1} + (P^f)^{-1})^{-1}`, `μ^s = P^s((P^f)^{-1}μ^f + (P^b)^{-1}μ^b)`,
/// evaluated through a single Cholesky solve with `P^f + P^b`.
pub fn fuse_two_filter(pass: &FilterPass, back: &BackwardPass) -> Result<SmoothedMoments> {
    let n_steps = pass.len();
    if back.steps.len() + 1 != n_steps {
        return Err(Error::invalid("backward pass does not match forward pass length"));
    }
    let mut mu_s = Vec::with_capacity(n_steps);
    let mut p_s = Vec::with_capacity(n_steps);
    for (k, b) in back.steps.iter().enumerate() {
        let f = &pass.steps[k];
        let total = symmetrize(&(&f.p_post + &b.p_b));
        let chol =
            total.cholesky().ok_or_else(|| Error::at(k + 1, "fusion of forward and backward covariances failed"))?;
        let p = symmetrize(&(&f.p_post - &f.p_post * chol.solve(&f.p_post)));
        let mu = &f.mu_post + &f.p_post * chol.solve(&(&b.mu_b - &f.mu_post));
        mu_s.push(mu);
        p_s.push(p);
    }
    let last = &pass.steps[n_steps - 1];
    mu_s.push(last.mu_post.clone());
    p_s.push(last.p_post.clone());
    SmoothedMoments::assemble(pass, mu_s, p_s)
}

/// `σ_min(H) > 1e−8 σ_max(H)` with at least as many rows as columns.
pub fn has_full_column_rank(h: &DMatrix<f64>) -> bool {
    if h.nrows() < h.ncols() {
        return false;
    }
    let sv = h.singular_values();
    sv.max() > 0.0 && sv.min() > 1e-8 * sv.max()
}

/// Two-filter smoother: one RTS step at `N − 1`, [`backward_init`],
/// [`backward_pass`] and [`fuse_two_filter`].
pub fn two_filter_smoother(
    params: &ModelParams,
    data: &TimedObservations,
    pass: &FilterPass,
) -> Result<(SmoothedMoments, BackwardPass)> {
    let n_steps = pass.len();
    if n_steps == 1 {
        let only = &pass.steps[0];
        let moments = SmoothedMoments::assemble(pass, vec![only.mu_post.clone()], vec![only.p_post.clone()])?;
        return Ok((moments, BackwardPass { steps: Vec::new(), init_repaired: false }));
    }
    if !has_full_column_rank(&params.h) {
        return Err(Error::Numerical(
            "H lacks full column rank, so the backward likelihood has no covariance form".into(),
        ));
    }
    let last = &pass.steps[n_steps - 1];
    let (mu_tail, p_tail) = rts_step(pass, n_steps - 2, &last.mu_post, &last.p_post)?;
    let f = &pass.steps[n_steps - 2];
    let init = backward_init(&f.p_post, &f.mu_post, &p_tail, &mu_tail);
    let back = backward_pass(params, data, pass, init)?;
    let moments = fuse_two_filter(pass, &back)?;
    Ok((moments, back))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::forward_filter;
    use approx::assert_relative_eq;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_model() -> ModelParams {
        ModelParams {
            a: scalar(-0.4),
            qc: scalar(0.8),
            h: scalar(1.0),
            r: scalar(0.5),
            mu0: DVector::from_element(1, 1.0),
            p0: scalar(2.0),
        }
    }

    fn scalar_data() -> TimedObservations {
        TimedObservations::new(
            vec![0.0, 0.7, 1.0, 2.2, 2.5, 4.0],
            DMatrix::from_column_slice(6, 1, &[1.2, 0.4, 0.9, -0.3, 0.1, 0.6]),
        )
        .unwrap()
    }

    #[test]
    fn single_step_smoothing_is_filtering() {
        let p = scalar_model();
        let data = TimedObservations::new(vec![0.0], scalar(0.3)).unwrap();
        let pass = forward_filter(&p, &data).unwrap();
        let rts = rts_smoother(&pass).unwrap();
        assert_eq!(rts.mu_s[0], pass.steps[0].mu_post);
        let (two, _) = two_filter_smoother(&p, &data, &pass).unwrap();
        assert_eq!(two, rts);
    }

    #[test]
    fn init_inverts_fusion() {
        let (pf, pb_true) = (0.8, 3.0);
        let ps = 1.0 / (1.0 / pf + 1.0 / pb_true);
        let (mf, mb) = (0.25, -1.5);
        let ms = ps * (mf / pf + mb / pb_true);
        let (pb, mu_b, repaired) =
            backward_init(&scalar(pf), &DVector::from_element(1, mf), &scalar(ps), &DVector::from_element(1, ms));
        assert!(!repaired);
        assert_relative_eq!(pb[(0, 0)], pb_true, max_relative = 1e-12);
        assert_relative_eq!(mu_b[0], mb, max_relative = 1e-12);
    }

    #[test]
    fn precision_weighted_average() {
        // Pf = Pb = 2, μf = 0, μb = 4 → P_s = 1, μ_s = 2
        let p = scalar_model();
        let data = TimedObservations::new(vec![0.0, 1.0], DMatrix::zeros(2, 1)).unwrap();
        let mut pass = forward_filter(&p, &data).unwrap();
        pass.steps[0].p_post = scalar(2.0);
        pass.steps[0].mu_post = DVector::zeros(1);
        let back = BackwardPass {
            steps: vec![BackwardStep { mu_b: DVector::from_element(1, 4.0), p_b: scalar(2.0), gain: None }],
            init_repaired: false,
        };
        let sm = fuse_two_filter(&pass, &back).unwrap();
        assert_relative_eq!(sm.p_s[0][(0, 0)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(sm.mu_s[0][0], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn vague_backward_leaves_forward_posterior() {
        let p = scalar_model();
        let data = scalar_data();
        let pass = forward_filter(&p, &data).unwrap();
        let back = BackwardPass {
            steps: (0..data.len() - 1)
                .map(|_| BackwardStep { mu_b: DVector::from_element(1, 3.0), p_b: scalar(1e14), gain: None })
                .collect(),
            init_repaired: false,
        };
        let sm = fuse_two_filter(&pass, &back).unwrap();
        for k in 0..data.len() {
            assert_relative_eq!(sm.p_s[k], pass.steps[k].p_post, max_relative = 1e-9);
            assert_relative_eq!(sm.mu_s[k], pass.steps[k].mu_post, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn scalar_backward_recursion_matches_hand_algebra() {
        let p = scalar_model();
        let data = scalar_data();
        let pass = forward_filter(&p, &data).unwrap();
        let (_, back) = two_filter_smoother(&p, &data, &pass).unwrap();
        let (a, r) = (-0.4f64, 0.5);
        for k in 0..back.steps.len() - 1 {
            let tau = data.taus()[k];
            let q = pass.transitions[k].q[(0, 0)];
            let pn = back.steps[k + 1].p_b[(0, 0)];
            let expected = (-2.0 * a * tau).exp() * (q + pn * r / (pn + r));
            assert_relative_eq!(back.steps[k].p_b[(0, 0)], expected, max_relative = 1e-12);
            let det = (-a * tau).exp();
            assert!(det > 1.0);
        }
    }

    #[test]
    fn two_filter_matches_rts_on_scalar() {
        let p = scalar_model();
        let data = scalar_data();
        let pass = forward_filter(&p, &data).unwrap();
        let rts = rts_smoother(&pass).unwrap();
        let (two, back) = two_filter_smoother(&p, &data, &pass).unwrap();
        assert!(!back.init_repaired);
        for k in 0..data.len() {
            assert_relative_eq!(two.mu_s[k], rts.mu_s[k], max_relative = 1e-10);
            assert_relative_eq!(two.p_s[k], rts.p_s[k], max_relative = 1e-10);
            assert!(two.p_s[k][(0, 0)] <= pass.steps[k].p_post[(0, 0)] + 1e-14);
        }
        for k in 0..data.len() - 1 {
            assert_relative_eq!(two.exx_prev[k], rts.exx_prev[k], max_relative = 1e-10);
        }
    }

    #[test]
    fn minimal_two_step_case() {
        let p = scalar_model();
        let data = TimedObservations::new(vec![0.0, 0.5], DMatrix::from_column_slice(2, 1, &[0.2, 0.9])).unwrap();
        let pass = forward_filter(&p, &data).unwrap();
        let (two, back) = two_filter_smoother(&p, &data, &pass).unwrap();
        assert_eq!(back.steps.len(), 1);
        let rts = rts_smoother(&pass).unwrap();
        assert_relative_eq!(two.mu_s[0], rts.mu_s[0], max_relative = 1e-10);
    }
}
