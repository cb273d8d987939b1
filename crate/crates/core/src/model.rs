//! Model parameters, observation series and exact discretization.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{expm, noise_covariance_q};

/// Continuous-discrete linear Gaussian model
/// `dx = A x dt + dw`, `E[dw dwᵀ] = Q_c dt`, `z_k = H x(t_k) + v_k`, `v_k ~ N(0, R)`,
/// with `x(t_1) ~ N(μ₀, P₀)`. Time is measured in minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    #[serde(with = "rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "rows")]
    pub qc: DMatrix<f64>,
    #[serde(with = "rows")]
    pub h: DMatrix<f64>,
    #[serde(with = "rows")]
    pub r: DMatrix<f64>,
    #[serde(with = "vector")]
    pub mu0: DVector<f64>,
    #[serde(with = "rows")]
    pub p0: DMatrix<f64>,
}

impl ModelParams {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    /// Every violated invariant, or `Ok(())`.
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut problems = Vec::new();
        let n = self.a.nrows();
        if n == 0 || self.a.ncols() != n {
            problems.push(format!("A must be square and non-empty, got {}x{}", self.a.nrows(), self.a.ncols()));
        }
        let m = self.h.nrows();
        let square = |name: &str, mat: &DMatrix<f64>, dim: usize, problems: &mut Vec<String>| {
            if mat.shape() != (dim, dim) {
                problems.push(format!("{name} must be {dim}x{dim}, got {}x{}", mat.nrows(), mat.ncols()));
                false
            } else {
                true
            }
        };
        let qc_ok = square("Qc", &self.qc, n, &mut problems);
        let p0_ok = square("P0", &self.p0, n, &mut problems);
        if self.h.ncols() != n || m == 0 {
            problems.push(format!("H must be m x {n} with m >= 1, got {}x{}", self.h.nrows(), self.h.ncols()));
        }
        let r_ok = square("R", &self.r, m, &mut problems);
        if self.mu0.len() != n {
            problems.push(format!("mu0 must have length {n}, got {}", self.mu0.len()));
        }
        for (name, vals) in [
            ("A", self.a.as_slice()),
            ("Qc", self.qc.as_slice()),
            ("H", self.h.as_slice()),
            ("R", self.r.as_slice()),
            ("mu0", self.mu0.as_slice()),
            ("P0", self.p0.as_slice()),
        ] {
            if vals.iter().any(|v| !v.is_finite()) {
                problems.push(format!("{name} has non-finite entries"));
            }
        }

        for (name, mat, ok) in [("Qc", &self.qc, qc_ok), ("R", &self.r, r_ok), ("P0", &self.p0, p0_ok)] {
            if !ok || mat.iter().any(|v| !v.is_finite()) {
                continue;
            }
            if !crate::kernels::is_symmetric(mat, 1e-12) {
                problems.push(format!("{name} not symmetric"));
            } else if mat.clone().cholesky().is_none() {
                problems.push(format!("{name} not positive definite"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    pub fn validated(self) -> Result<Self> {
        self.validate().map_err(Error::Validation)?;
        Ok(self)
    }
}

/// Observation times (strictly increasing) with one observation row each.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedObservations {
    times: Vec<f64>,
    obs: DMatrix<f64>,
    taus: Vec<f64>,
}

impl TimedObservations {
    /// `obs` is `N × m`, one row per timestamp.
    pub fn new(times: Vec<f64>, obs: DMatrix<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::invalid("at least one observation is required"));
        }
        if obs.nrows() != times.len() {
            return Err(Error::invalid(format!("{} timestamps but {} observation rows", times.len(), obs.nrows())));
        }
        if obs.ncols() == 0 {
            return Err(Error::invalid("observations must have at least one column"));
        }
        if times.iter().chain(obs.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("times and observations must be finite"));
        }
        let taus: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        if let Some(k) = taus.iter().position(|&t| t <= 0.0) {
            return Err(Error::invalid(format!(
                "timestamps must be strictly increasing (t[{}] = {} follows {})",
                k + 2,
                times[k + 1],
                times[k]
            )));
        }
        Ok(Self { times, obs, taus })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs.ncols()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// `τ_k = t_k − t_{k−1}`; element `i` is the step into observation `i + 1` (0-based).
    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn observations(&self) -> &DMatrix<f64> {
        &self.obs
    }

    /// Observation `k` (0-based) as a column vector.
    pub fn z(&self, k: usize) -> DVector<f64> {
        self.obs.row(k).transpose()
    }

    /// Reads `t,z1,...,zm`; any other columns (e.g. latent `x1..xn`) are ignored.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let t_col =
            headers.iter().position(|h| h.trim() == "t").ok_or_else(|| Error::Parse("missing `t` column".into()))?;
        let mut z_cols: Vec<(usize, usize)> = headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.trim().strip_prefix('z').and_then(|s| s.parse::<usize>().ok()).map(|k| (k, i)))
            .collect();
        z_cols.sort_unstable();
        if z_cols.is_empty() || z_cols.iter().enumerate().any(|(i, (k, _))| *k != i + 1) {
            return Err(Error::Parse("observation columns must be z1..zm".into()));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |col: usize| -> Result<f64> {
                let field = rec.get(col).unwrap_or("").trim();
                field.parse::<f64>().map_err(|_| Error::Parse(format!("row {}: cannot parse `{field}`", row + 2)))
            };
            times.push(parse(t_col)?);
            for &(_, c) in &z_cols {
                values.push(parse(c)?);
            }
        }
        let obs = DMatrix::from_row_slice(times.len(), z_cols.len(), &values);
        Self::new(times, obs)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        write_series_csv(writer, &self.times, &self.obs, None)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_csv_writer(std::fs::File::create(path)?)
    }
}

/// Shared writer for `t,z1..zm[,x1..xn]` files.
pub(crate) fn write_series_csv<W: Write>(
    writer: W,
    times: &[f64],
    obs: &DMatrix<f64>,
    latent: Option<&DMatrix<f64>>,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["t".to_string()];
    header.extend((1..=obs.ncols()).map(|i| format!("z{i}")));
    if let Some(x) = latent {
        header.extend((1..=x.ncols()).map(|i| format!("x{i}")));
    }
    wtr.write_record(&header)?;
    for (k, t) in times.iter().enumerate() {
        let mut row = vec![format!("{t:?}")];
        row.extend(obs.row(k).iter().map(|v| format!("{v:?}")));
        if let Some(x) = latent {
            row.extend(x.row(k).iter().map(|v| format!("{v:?}")));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Exact one-step transition of the SDE over a gap `τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedStep {
    /// `e^{Aτ}`
    pub f: DMatrix<f64>,
    /// `Q(τ)`
    pub q: DMatrix<f64>,
}

pub fn discretize(a: &DMatrix<f64>, qc: &DMatrix<f64>, tau: f64) -> Result<DiscretizedStep> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("time step must be > 0, got {tau}")));
    }
    Ok(DiscretizedStep { f: expm(a, tau)?, q: noise_covariance_q(a, qc, tau)? })
}

/// Row-major `Vec<Vec<f64>>` (de)serialization for dense matrices.
pub mod rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
    }
}

pub mod vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
