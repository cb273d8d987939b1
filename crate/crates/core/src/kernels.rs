//! Dense matrix-exponential and half-vectorization kernels.
//!
//! Everything here is a pure function on small dense matrices. The matrix
//! exponential and its Fréchet derivative use Padé scaling-and-squaring; the
//! covariance integral `Q(τ) = ∫₀^τ e^{As} Q_c e^{Aᵀs} ds` is evaluated in the
//! half-vectorized space through the generator `A_P = D†(I⊗A + A⊗I)D` and the
//! φ₁ function, which stays well defined when `A_P` is singular.
//!
//! `vech` stacks the lower triangle column by column: `(0,0), (1,0), …,
//! (n-1,0), (1,1), …`. The duplication and elimination matrices follow the
//! same ordering.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const PADE9: [f64; 10] =
    [17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0, 2162160.0, 110880.0, 3960.0, 90.0, 1.0];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// 1-norm bounds for degrees 3, 5, 7, 9, 13 (exponential alone).
#[allow(clippy::excessive_precision)]
const THETA_EXPM: [f64; 5] =
    [1.495585217958292e-2, 2.539398330063230e-1, 9.504178996162932e-1, 2.097847961257068e0, 5.371920351148152e0];

/// 1-norm bounds for degrees 3, 5, 7, 9, 13 (exponential with Fréchet derivative).
const THETA_FRECHET: [f64; 5] = [1.08e-2, 2.00e-1, 7.83e-1, 1.78e0, 4.74e0];

pub(crate) fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} has non-finite entries")))
    }
}

fn check_square(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    if m.nrows() == 0 || m.nrows() != m.ncols() {
        return Err(Error::invalid(format!("{what} must be square and non-empty, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(m.nrows())
}

/// Numerator/denominator pieces `U`, `V` of the Padé approximant and,
/// when a direction is given, their directional derivatives `Lu`, `Lv`.
struct PadeParts {
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    du: Option<DMatrix<f64>>,
    dv: Option<DMatrix<f64>>,
}

/// Low-degree (3, 5, 7, 9) approximants from the even powers of `a`.
fn pade_low(a: &DMatrix<f64>, e: Option<&DMatrix<f64>>, b: &[f64]) -> PadeParts {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let half = (b.len() - 1) / 2;

    // powers[j] = A^{2j}, dpowers[j] = d(A^{2j})[E]
    let mut powers = vec![ident.clone(), a * a];
    while powers.len() <= half {
        let next = &powers[powers.len() - 1] * &powers[1];
        powers.push(next);
    }
    let dpowers = e.map(|e| {
        let mut d = vec![DMatrix::zeros(n, n), a * e + e * a];
        while d.len() <= half {
            let j = d.len();
            // d(A^{2j}) = A^{2(j-1)} d(A^2) + d(A^{2(j-1)}) A^2
            let next = &powers[j - 1] * &d[1] + &d[j - 1] * &powers[1];
            d.push(next);
        }
        d
    });

    let mut odd = DMatrix::zeros(n, n);
    let mut even = DMatrix::zeros(n, n);
    for j in 0..=half {
        odd += &powers[j] * b[2 * j + 1];
        even += &powers[j] * b[2 * j];
    }
    let u = a * &odd;

    let (du, dv) = match (e, dpowers) {
        (Some(e), Some(d)) => {
            let mut dodd = DMatrix::zeros(n, n);
            let mut deven = DMatrix::zeros(n, n);
            for j in 1..=half {
                dodd += &d[j] * b[2 * j + 1];
                deven += &d[j] * b[2 * j];
            }
            (Some(a * dodd + e * &odd), Some(deven))
        }
        _ => (None, None),
    };
    PadeParts { u, v: even, du, dv }
}

fn pade13(a: &DMatrix<f64>, e: Option<&DMatrix<f64>>) -> PadeParts {
    let b = &PADE13;
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;

    let w1 = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let w2 = &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1];
    let z1 = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let z2 = &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
    let w = &a6 * &w1 + &w2;
    let u = a * &w;
    let v = &a6 * &z1 + z2;

    let (du, dv) = match e {
        Some(e) => {
            let m2 = a * e + e * a;
            let m4 = &a2 * &m2 + &m2 * &a2;
            let m6 = &a4 * &m2 + &m4 * &a2;
            let lw1 = &m6 * b[13] + &m4 * b[11] + &m2 * b[9];
            let lw2 = &m6 * b[7] + &m4 * b[5] + &m2 * b[3];
            let lz1 = &m6 * b[12] + &m4 * b[10] + &m2 * b[8];
            let lz2 = &m6 * b[6] + &m4 * b[4] + &m2 * b[2];
            let lw = &a6 * lw1 + &m6 * &w1 + lw2;
            let lu = a * lw + e * &w;
            let lv = &a6 * lz1 + &m6 * &z1 + lz2;
            (Some(lu), Some(lv))
        }
        None => (None, None),
    };
    PadeParts { u, v, du, dv }
}

/// Scaling and squaring driver shared by `expm` and `expm_frechet`.
fn scaling_and_squaring(
    a: &DMatrix<f64>,
    e: Option<&DMatrix<f64>>,
    theta: &[f64; 5],
) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    let norm = norm1(a);
    let low: [&[f64]; 4] = [&PADE3, &PADE5, &PADE7, &PADE9];

    let mut squarings = 0u32;
    let parts = match low.iter().zip(theta.iter()).find(|(_, &th)| norm <= th) {
        Some((b, _)) => pade_low(a, e, b),
        None => {
            squarings = (norm / theta[4]).log2().ceil().max(0.0) as u32;
            let scale = 0.5f64.powi(squarings as i32);
            let a_s = a * scale;
            let e_s = e.map(|e| e * scale);
            pade13(&a_s, e_s.as_ref())
        }
    };

    let denom = (&parts.v - &parts.u).lu();
    let mut r =
        denom.solve(&(&parts.v + &parts.u)).ok_or_else(|| Error::Numerical("Padé denominator is singular".into()))?;
    let mut l = match (parts.du, parts.dv) {
        (Some(du), Some(dv)) => {
            let rhs = &du + &dv + (&du - &dv) * &r;
            Some(denom.solve(&rhs).ok_or_else(|| Error::Numerical("Padé denominator is singular".into()))?)
        }
        _ => None,
    };
    for _ in 0..squarings {
        if let Some(lm) = l.as_mut() {
            *lm = &r * &*lm + &*lm * &r;
        }
        r = &r * &r;
    }
    Ok((r, l))
}

/// `e^{M t}` by degree-13 class Padé scaling and squaring.
pub fn expm(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    check_square(m, "expm argument")?;
    check_finite(m, "expm argument")?;
    if !t.is_finite() {
        return Err(Error::invalid("expm time must be finite"));
    }
    let (r, _) = scaling_and_squaring(&(m * t), None, &THETA_EXPM)?;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix exponential overflowed".into()));
    }
    Ok(r)
}

/// Returns `(e^M, L(M, V))` where `L(M, V) = ∫₀¹ e^{M(1-s)} V e^{Ms} ds` is
/// the Fréchet derivative of the exponential at `M` in direction `V`.
pub fn expm_frechet(m: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_square(m, "expm_frechet argument")?;
    if v.shape() != m.shape() {
        return Err(Error::invalid(format!(
            "direction shape {:?} does not match matrix shape {:?}",
            v.shape(),
            m.shape()
        )));
    }
    check_finite(m, "expm_frechet argument")?;
    check_finite(v, "expm_frechet direction")?;
    let (r, l) = scaling_and_squaring(m, Some(v), &THETA_FRECHET)?;
    let l = l.expect("direction supplied");
    if r.iter().chain(l.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix exponential overflowed".into()));
    }
    Ok((r, l))
}

/// Length of the half-vectorization of an `n×n` symmetric matrix.
pub fn half_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of entry `(i, j)`, `i >= j`, inside `vech`.
#[inline]
pub(crate) fn vech_pos(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i >= j && i < n);
    // entries in columns 0..j of the lower triangle, then the offset in column j
    j * n - j * j.saturating_sub(1) / 2 + (i - j)
}

/// Half-vectorized symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfVector {
    data: DVector<f64>,
    n: usize,
}

impl HalfVector {
    pub fn new(data: DVector<f64>, n: usize) -> Result<Self> {
        if data.len() != half_len(n) {
            return Err(Error::invalid(format!(
                "half-vector of length {} does not match dimension {n} (expected {})",
                data.len(),
                half_len(n)
            )));
        }
        Ok(Self { data, n })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.data
    }
}

pub(crate) fn is_symmetric(s: &DMatrix<f64>, rel_tol: f64) -> bool {
    if s.nrows() != s.ncols() {
        return false;
    }
    let scale = s.amax().max(f64::MIN_POSITIVE);
    let n = s.nrows();
    (0..n).all(|j| (j + 1..n).all(|i| (s[(i, j)] - s[(j, i)]).abs() <= rel_tol * scale))
}

pub(crate) fn vech_unchecked(s: &DMatrix<f64>) -> DVector<f64> {
    let n = s.nrows();
    let mut out = DVector::zeros(half_len(n));
    let mut p = 0;
    for j in 0..n {
        for i in j..n {
            out[p] = s[(i, j)];
            p += 1;
        }
    }
    out
}

pub(crate) fn unvech_raw(h: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(n, n);
    let mut p = 0;
    for j in 0..n {
        for i in j..n {
            s[(i, j)] = h[p];
            s[(j, i)] = h[p];
            p += 1;
        }
    }
    s
}

/// Half-vectorization of a symmetric matrix.
pub fn vech(s: &DMatrix<f64>) -> Result<HalfVector> {
    check_square(s, "vech argument")?;
    if !is_symmetric(s, 1e-12) {
        return Err(Error::invalid("vech requires a symmetric matrix"));
    }
    Ok(HalfVector { data: vech_unchecked(s), n: s.nrows() })
}

/// Inverse of [`vech`].
pub fn unvech(h: &HalfVector) -> DMatrix<f64> {
    unvech_raw(&h.data, h.n)
}

/// Duplication matrix `D` (`n² × n(n+1)/2`) with `D·vech(S) = vec(S)`.
pub fn duplication_matrix(n: usize) -> Result<DMatrix<f64>> {
    if n < 1 {
        return Err(Error::invalid("duplication matrix needs n >= 1"));
    }
    let mut d = DMatrix::zeros(n * n, half_len(n));
    for j in 0..n {
        for i in 0..n {
            let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
            d[(j * n + i, vech_pos(n, hi, lo))] = 1.0;
        }
    }
    Ok(d)
}

/// Elimination matrix `D†` (`n(n+1)/2 × n²`) with `D†·vec(S) = vech(S)`
/// and `D†·D = I`.
pub fn elimination_matrix(n: usize) -> Result<DMatrix<f64>> {
    if n < 1 {
        return Err(Error::invalid("elimination matrix needs n >= 1"));
    }
    let mut e = DMatrix::zeros(half_len(n), n * n);
    for j in 0..n {
        for i in j..n {
            e[(vech_pos(n, i, j), j * n + i)] = 1.0;
        }
    }
    Ok(e)
}

/// Half-vectorized Lyapunov generator `A_P = D†(I⊗A + A⊗I)D`, i.e. the
/// matrix with `A_P·vech(S) = vech(AS + SAᵀ)` for symmetric `S`.
pub fn build_ap(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = check_square(a, "dynamics matrix")?;
    check_finite(a, "dynamics matrix")?;
    let p = half_len(n);
    let mut ap = DMatrix::zeros(p, p);
    let mut basis = DVector::zeros(p);
    for col in 0..p {
        basis[col] = 1.0;
        let s = unvech_raw(&basis, n);
        let as_ = a * &s;
        let image = &as_ + as_.transpose();
        ap.set_column(col, &vech_unchecked(&image));
        basis[col] = 0.0;
    }
    Ok(ap)
}

/// `∫₀ᵗ e^{Ms} ds`, i.e. the matrix `Φ` with `M·Φ = e^{Mt} − I`, computed
/// from the exponential of the augmented block `[[M, I], [0, 0]]·t`.
pub fn phi1(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    let n = check_square(m, "phi1 argument")?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("phi1 needs finite t >= 0, got {t}")));
    }
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(m * t));
    block.view_mut((0, n), (n, n)).copy_from(&(DMatrix::<f64>::identity(n, n) * t));
    let e = expm(&block, 1.0)?;
    Ok(e.view((0, n), (n, n)).into_owned())
}

/// Step covariance `Q(τ) = ∫₀^τ e^{A(τ−s)} Q_c e^{Aᵀ(τ−s)} ds`.
pub fn noise_covariance_q(a: &DMatrix<f64>, qc: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    let n = check_square(a, "dynamics matrix")?;
    if qc.shape() != (n, n) {
        return Err(Error::invalid("diffusion covariance shape does not match dynamics"));
    }
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("time step must be finite and >= 0, got {tau}")));
    }
    if tau == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let ap = build_ap(a)?;
    let phi = phi1(&ap, tau)?;
    let hq = vech_unchecked(&symmetrize(qc));
    Ok(unvech_raw(&(phi * hq), n))
}

pub(crate) fn symmetrize(s: &DMatrix<f64>) -> DMatrix<f64> {
    (s + s.transpose()) * 0.5
}

/// Frobenius-nearest positive semi-definite matrix plus `jitter·I`.
pub fn nearest_psd(s: &DMatrix<f64>, jitter: f64) -> DMatrix<f64> {
    let n = s.nrows();
    let eig = symmetrize(s).symmetric_eigen();
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let u = &eig.eigenvectors;
    let mut out = u * DMatrix::from_diagonal(&clamped) * u.transpose();
    for i in 0..n {
        out[(i, i)] += jitter;
    }
    symmetrize(&out)
}

/// Default repair jitter: `1e-10 · trace(S)/n`, floored for tiny matrices.
pub(crate) fn default_jitter(s: &DMatrix<f64>) -> f64 {
    let n = s.nrows().max(1) as f64;
    let scale = (s.trace().abs() / n).max(s.amax());
    if scale > 0.0 {
        1e-10 * scale
    } else {
        1e-12
    }
}

/// Symmetrize `s` and, only if Cholesky fails, project it onto the PSD cone
/// with growing jitter until it factors. The flag reports a repair.
pub(crate) fn ensure_pd(s: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = symmetrize(s);
    if sym.clone().cholesky().is_some() {
        return (sym, false);
    }
    let mut jitter = default_jitter(&sym);
    loop {
        let repaired = nearest_psd(&sym, jitter);
        if repaired.clone().cholesky().is_some() || !jitter.is_finite() {
            return (repaired, true);
        }
        jitter *= 10.0;
    }
}

/// `ln det` of a symmetric positive-definite matrix from its Cholesky factor.
pub(crate) fn chol_logdet(chol: &nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum()
}

/// Spectral radius via the real Schur form.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}
