//! Monte-Carlo comparison of continuous-time EM against the discrete-time
//! baseline on the linearized toggle switch.
//!
//! Each replicate draws its own step sizes and trajectory, then fits both
//! models on the same data. The dynamics protocol learns `A` (resp. `F`) with
//! the noise fixed at truth; the covariance protocol learns `Q_c` (resp. `Q`)
//! with the dynamics fixed at truth.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{discrete_em, DiscreteParams};
use crate::em::{default_init, run_em, EMOptions, Param};
use crate::error::{Error, Result};
use crate::kernels::{expm, noise_covariance_q, spectral_radius};
use crate::model::ModelParams;
use crate::simulate::{
    beta_steps, sample_trajectory, times_from_taus, toggle_switch_dynamics, uniform_breaks, ToggleRates,
};

/// `‖e^{A τ̄} − F‖_F²`
pub fn loss_dynamics_discrete(a_true: &DMatrix<f64>, tau_bar: f64, f_learned: &DMatrix<f64>) -> Result<f64> {
    Ok((expm(a_true, tau_bar)? - f_learned).norm_squared())
}

/// `‖e^{A τ̄} − e^{Â τ̄}‖_F²`
pub fn loss_dynamics_continuous(a_true: &DMatrix<f64>, tau_bar: f64, a_learned: &DMatrix<f64>) -> Result<f64> {
    Ok((expm(a_true, tau_bar)? - expm(a_learned, tau_bar)?).norm_squared())
}

/// `‖Q(τ̄; A, B) − Q̂‖_F²`
pub fn loss_covariance_discrete(
    a_true: &DMatrix<f64>,
    b_true: &DMatrix<f64>,
    tau_bar: f64,
    q_learned: &DMatrix<f64>,
) -> Result<f64> {
    Ok((noise_covariance_q(a_true, b_true, tau_bar)? - q_learned).norm_squared())
}

/// `‖Q(τ̄; A, B) − Q(τ̄; A, B̂)‖_F²`, both integrated with the true `A`.
pub fn loss_covariance_continuous(
    a_true: &DMatrix<f64>,
    b_true: &DMatrix<f64>,
    tau_bar: f64,
    b_learned: &DMatrix<f64>,
) -> Result<f64> {
    let diff = noise_covariance_q(a_true, b_true, tau_bar)? - noise_covariance_q(a_true, b_learned, tau_bar)?;
    Ok(diff.norm_squared())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    UniformBreaks,
    BetaSteps,
}

/// Observation model shared by every replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationSetup {
    pub obs_dim: usize,
    /// `H` has i.i.d. `N(0, 1)` entries drawn from this seed.
    pub h_seed: u64,
    pub r_scale: f64,
    pub p0_scale: f64,
}

impl Default for ObservationSetup {
    fn default() -> Self {
        Self { obs_dim: 10, h_seed: 7, r_scale: 1.0, p0_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub omega_list: Vec<f64>,
    #[serde(default, rename = "T_list")]
    pub t_list: Vec<f64>,
    #[serde(default, rename = "N_list")]
    pub n_list: Vec<usize>,
    #[serde(default)]
    pub gamma_list: Vec<f64>,
    /// Number of observations in the Beta-step experiment.
    #[serde(default, rename = "N")]
    pub n_obs: usize,
    /// Upper end of the Beta-step interval.
    #[serde(default)]
    pub scale: f64,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default)]
    pub rates: ToggleRates,
    #[serde(default)]
    pub setup: ObservationSetup,
    #[serde(default)]
    pub continuous: EMOptions,
    #[serde(default)]
    pub discrete: EMOptions,
    /// Fit dynamics and noise together instead of the two separate protocols.
    #[serde(default)]
    pub learn_both: bool,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Spectral-radius sweep over `ω ∈ {1, 5, …, 30}` with `T/N = 1/2`.
    pub fn uniform_breaks() -> Self {
        Self {
            experiment: ExperimentKind::UniformBreaks,
            omega_list: vec![1.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            t_list: vec![100.0, 70.0, 60.0, 50.0, 40.0, 30.0, 20.0],
            n_list: vec![200, 140, 120, 100, 80, 60, 40],
            gamma_list: Vec::new(),
            n_obs: 0,
            scale: 0.0,
            replicates: 100,
            seed: 0,
            rates: ToggleRates::default(),
            setup: ObservationSetup::default(),
            continuous: EMOptions::default(),
            discrete: EMOptions::default(),
            learn_both: false,
            threads: None,
            out: None,
        }
    }

    /// Step-variance sweep with `Beta(γ, γ)` steps on `[0, 1/2]`, 40 steps, `ρ(A) = 1`.
    pub fn beta_steps() -> Self {
        Self {
            experiment: ExperimentKind::BetaSteps,
            omega_list: Vec::new(),
            t_list: Vec::new(),
            n_list: Vec::new(),
            gamma_list: vec![0.5, 1.0, 2.0, 6.0, 10_000.0],
            n_obs: 40,
            scale: 0.5,
            ..Self::uniform_breaks()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.replicates == 0 {
            problems.push("replicates must be >= 1".to_string());
        }
        match self.experiment {
            ExperimentKind::UniformBreaks => {
                if self.omega_list.is_empty() {
                    problems.push("omega_list is empty".into());
                }
                if self.t_list.len() != self.omega_list.len() || self.n_list.len() != self.omega_list.len() {
                    problems.push("omega_list, T_list and N_list must have equal lengths".into());
                }
                if self.omega_list.iter().chain(&self.t_list).any(|v| !(v.is_finite() && *v > 0.0)) {
                    problems.push("omega and T values must be finite and > 0".into());
                }
                if self.n_list.iter().any(|&n| n < 3) {
                    problems.push("N values must be >= 3".into());
                }
            }
            ExperimentKind::BetaSteps => {
                if self.gamma_list.is_empty() {
                    problems.push("gamma_list is empty".into());
                }
                if self.gamma_list.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    problems.push("gamma values must be finite and > 0".into());
                }
                if self.n_obs < 3 {
                    problems.push("N must be >= 3".into());
                }
                if !(self.scale.is_finite() && self.scale > 0.0) {
                    problems.push("scale must be finite and > 0".into());
                }
            }
        }
        if self.setup.obs_dim == 0 {
            problems.push("setup.obs_dim must be >= 1".into());
        }
        if !(self.setup.r_scale > 0.0 && self.setup.p0_scale > 0.0) {
            problems.push("setup.r_scale and setup.p0_scale must be > 0".into());
        }
        if self.threads == Some(0) {
            problems.push("threads must be >= 1".into());
        }
        for (name, o) in [("continuous", &self.continuous), ("discrete", &self.discrete)] {
            if let Err(e) = o.validate() {
                problems.push(format!("{name}: {e}"));
            }
        }
        if let Err(e) = self.rates.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Sweep values in order: `ω` or `γ`.
    pub fn sweep_values(&self) -> &[f64] {
        match self.experiment {
            ExperimentKind::UniformBreaks => &self.omega_list,
            ExperimentKind::BetaSteps => &self.gamma_list,
        }
    }
}

/// One replicate at one sweep value. A loss is `None` when its fit failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub sweep: f64,
    pub replicate: usize,
    pub loss_dyn_d: Option<f64>,
    pub loss_dyn_c: Option<f64>,
    pub loss_cov_d: Option<f64>,
    pub loss_cov_c: Option<f64>,
    /// Number of fits that failed.
    pub failures: usize,
}

pub const METRICS: [&str; 4] = ["loss_dyn_d", "loss_dyn_c", "loss_cov_d", "loss_cov_c"];

impl LossRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "loss_dyn_d" => self.loss_dyn_d,
            "loss_dyn_c" => self.loss_dyn_c,
            "loss_cov_d" => self.loss_cov_d,
            "loss_cov_c" => self.loss_cov_c,
            _ => None,
        }
    }
}

/// Ground truth and step sizes of one replicate.
struct Scenario {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    taus: Vec<f64>,
    sim_seed: u64,
    init_seed: u64,
}

/// Seeds for replicate `rep` at sweep index `sweep`, independent across both.
fn replicate_seeds(base: u64, sweep: usize, rep: usize) -> (u64, u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(((sweep as u64) << 32) | rep as u64);
    (rng.random(), rng.random(), rng.random())
}

fn observation_matrix(setup: &ObservationSetup, n: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.h_seed);
    DMatrix::from_fn(setup.obs_dim, n, |_, _| rng.sample(StandardNormal))
}

fn observed_model(rates: &ToggleRates, setup: &ObservationSetup, a: DMatrix<f64>, qc: DMatrix<f64>) -> ModelParams {
    let n = a.nrows();
    ModelParams {
        a,
        qc,
        h: observation_matrix(setup, n),
        r: DMatrix::identity(setup.obs_dim, setup.obs_dim) * setup.r_scale,
        mu0: rates.equilibrium(),
        p0: DMatrix::identity(n, n) * setup.p0_scale,
    }
}

/// The toggle-switch model with dynamics scaled by `omega`, observed through `setup`.
pub fn toggle_model(rates: &ToggleRates, setup: &ObservationSetup, omega: f64) -> Result<ModelParams> {
    let (a, b) = toggle_switch_dynamics(rates)?;
    observed_model(rates, setup, a * omega, b).validated()
}

fn scenario(config: &ExperimentConfig, sweep: usize, rep: usize) -> Result<Scenario> {
    let (a0, b) = toggle_switch_dynamics(&config.rates)?;
    let (tau_seed, sim_seed, init_seed) = replicate_seeds(config.seed, sweep, rep);
    let (a, taus) = match config.experiment {
        ExperimentKind::UniformBreaks => {
            let taus = uniform_breaks(config.t_list[sweep], config.n_list[sweep], tau_seed)?;
            (a0 * config.omega_list[sweep], taus)
        }
        ExperimentKind::BetaSteps => {
            let rho = spectral_radius(&a0);
            let taus = beta_steps(config.gamma_list[sweep], config.n_obs, config.scale, tau_seed)?;
            (a0 / rho, taus)
        }
    };
    Ok(Scenario { a, b, taus, sim_seed, init_seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Protocol {
    Dynamics,
    Covariance,
    Both,
}

fn with_fixed(base: &EMOptions, extra: &[Param]) -> EMOptions {
    let mut opts = base.clone();
    opts.fixed.extend([Param::H, Param::R, Param::P0, Param::Mu0]);
    opts.fixed.extend(extra.iter().copied());
    opts
}

/// Losses `(dyn_d, dyn_c, cov_d, cov_c)` of one protocol; entries it does not produce stay `None`.
type Losses = [Option<f64>; 4];

#[allow(clippy::too_many_arguments)]
fn run_protocol(
    config: &ExperimentConfig,
    sc: &Scenario,
    truth: &ModelParams,
    init: &ModelParams,
    data: &crate::model::TimedObservations,
    protocol: Protocol,
    tau_bar: f64,
    failures: &mut usize,
) -> Losses {
    let mut out: Losses = [None; 4];
    let (cont_start, cont_fixed, disc_fixed) = match protocol {
        Protocol::Dynamics => (ModelParams { a: init.a.clone(), ..truth.clone() }, vec![Param::Qc], vec![Param::Qc]),
        Protocol::Covariance => (ModelParams { qc: init.qc.clone(), ..truth.clone() }, vec![Param::A], vec![Param::A]),
        Protocol::Both => {
            (ModelParams { a: init.a.clone(), qc: init.qc.clone(), ..truth.clone() }, Vec::new(), Vec::new())
        }
    };

    let continuous = run_em(&cont_start, data, &with_fixed(&config.continuous, &cont_fixed))
        .ok()
        .filter(|r| r.failure.is_none())
        .map(|r| r.params);
    match continuous {
        Some(p) => {
            if protocol != Protocol::Covariance {
                out[1] = loss_dynamics_continuous(&sc.a, tau_bar, &p.a).ok();
            }
            if protocol != Protocol::Dynamics {
                out[3] = loss_covariance_continuous(&sc.a, &sc.b, tau_bar, &p.qc).ok();
            }
        }
        None => *failures += 1,
    }

    // the baseline starts from the one-step map of the same initial guess
    let discrete = DiscreteParams::from_continuous(&cont_start, tau_bar)
        .and_then(|p0| discrete_em(&p0, data.observations(), &with_fixed(&config.discrete, &disc_fixed)))
        .ok()
        .filter(|r| r.failure.is_none())
        .map(|r| r.params);
    match discrete {
        Some(p) => {
            if protocol != Protocol::Covariance {
                out[0] = loss_dynamics_discrete(&sc.a, tau_bar, &p.f).ok();
            }
            if protocol != Protocol::Dynamics {
                out[2] = loss_covariance_discrete(&sc.a, &sc.b, tau_bar, &p.q).ok();
            }
        }
        None => *failures += 1,
    }
    out
}

fn run_replicate(config: &ExperimentConfig, sweep: usize, rep: usize) -> Result<LossRecord> {
    let sc = scenario(config, sweep, rep)?;
    let truth = observed_model(&config.rates, &config.setup, sc.a.clone(), sc.b.clone());
    let times = times_from_taus(&sc.taus);
    let data = sample_trajectory(&truth, &times, sc.sim_seed)?.observations()?;
    let init = default_init(&truth, &data, sc.init_seed)?;
    let tau_bar = sc.taus.iter().sum::<f64>() / sc.taus.len() as f64;

    let mut failures = 0;
    let losses = if config.learn_both {
        run_protocol(config, &sc, &truth, &init, &data, Protocol::Both, tau_bar, &mut failures)
    } else {
        let dynamics = run_protocol(config, &sc, &truth, &init, &data, Protocol::Dynamics, tau_bar, &mut failures);
        let covariance = run_protocol(config, &sc, &truth, &init, &data, Protocol::Covariance, tau_bar, &mut failures);
        [dynamics[0], dynamics[1], covariance[2], covariance[3]]
    };
    Ok(LossRecord {
        sweep: config.sweep_values()[sweep],
        replicate: rep,
        loss_dyn_d: losses[0],
        loss_dyn_c: losses[1],
        loss_cov_d: losses[2],
        loss_cov_c: losses[3],
        failures,
    })
}

fn run_all(config: &ExperimentConfig) -> Result<Vec<LossRecord>> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> =
        (0..config.sweep_values().len()).flat_map(|s| (0..config.replicates).map(move |r| (s, r))).collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = config.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::invalid(e.to_string()))?;
    let mut records =
        pool.install(|| jobs.par_iter().map(|&(s, r)| run_replicate(config, s, r)).collect::<Result<Vec<_>>>())?;
    records.sort_by(|a, b| a.sweep.total_cmp(&b.sweep).then(a.replicate.cmp(&b.replicate)));
    Ok(records)
}

/// Spectral-radius sweep: `A = ω A_toggle`, `N` uniform break points on `[0, T]`.
pub fn run_uniform_breaks(config: &ExperimentConfig) -> Result<Vec<LossRecord>> {
    if config.experiment != ExperimentKind::UniformBreaks {
        return Err(Error::invalid("config is not a uniform-breaks experiment"));
    }
    run_all(config)
}

/// Step-variance sweep: `A` scaled to unit spectral radius, `Beta(γ, γ)` steps.
pub fn run_beta_steps(config: &ExperimentConfig) -> Result<Vec<LossRecord>> {
    if config.experiment != ExperimentKind::BetaSteps {
        return Err(Error::invalid("config is not a beta-steps experiment"));
    }
    run_all(config)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<LossRecord>> {
    match config.experiment {
        ExperimentKind::UniformBreaks => run_uniform_breaks(config),
        ExperimentKind::BetaSteps => run_beta_steps(config),
    }
}

/// Box statistics of one metric at one sweep value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sweep: f64,
    pub metric: String,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub wlo: f64,
    pub whi: f64,
}

/// Linear-interpolation quantile of sorted data (`h = (n − 1) p`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median, quartiles and 1.5·IQR whiskers clamped to the data; `None` for empty input.
pub fn box_stats(values: &[f64]) -> Option<[f64; 5]> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.5), quantile_sorted(&v, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let wlo = v.iter().copied().find(|x| *x >= lo_fence).unwrap_or(q1);
    let whi = v.iter().rev().copied().find(|x| *x <= hi_fence).unwrap_or(q3);
    Some([median, q1, q3, wlo, whi])
}

/// Per sweep value and metric, statistics over the replicates whose fit succeeded.
pub fn summarize(records: &[LossRecord]) -> Vec<SummaryRow> {
    let mut sweeps: Vec<f64> = records.iter().map(|r| r.sweep).collect();
    sweeps.sort_by(f64::total_cmp);
    sweeps.dedup();
    let mut rows = Vec::new();
    for sweep in sweeps {
        for metric in METRICS {
            let values: Vec<f64> =
                records.iter().filter(|r| r.sweep == sweep).filter_map(|r| r.metric(metric)).collect();
            if let Some([median, q1, q3, wlo, whi]) = box_stats(&values) {
                rows.push(SummaryRow { sweep, metric: metric.to_string(), median, q1, q3, wlo, whi });
            }
        }
    }
    rows
}

pub fn write_records<W: Write>(writer: W, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(["sweep", "replicate", "loss_dyn_d", "loss_dyn_c", "loss_cov_d", "loss_cov_c", "failures"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(reader: R) -> Result<Vec<LossRecord>> {
    let mut rd = csv::Reader::from_reader(reader);
    let expected = ["sweep", "replicate", "loss_dyn_d", "loss_dyn_c", "loss_cov_d", "loss_cov_c", "failures"];
    let headers = rd.headers()?.clone();
    if headers.iter().ne(expected) {
        return Err(Error::Parse(format!(
            "records header must be {}, got {}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_summary<W: Write>(writer: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["sweep", "metric", "median", "q1", "q3", "wlo", "whi"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary<R: Read>(reader: R) -> Result<Vec<SummaryRow>> {
    csv::Reader::from_reader(reader).deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Writes `records.csv` and `summary.csv` into `dir`, creating it if needed.
pub fn write_outputs(dir: &Path, records: &[LossRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_records(std::fs::File::create(dir.join("records.csv"))?, records)?;
    write_summary(std::fs::File::create(dir.join("summary.csv"))?, &summarize(records))?;
    Ok(())
}
