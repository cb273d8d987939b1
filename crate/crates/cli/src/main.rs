use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdkf_core::bench::{
    read_records, run_experiment, summarize, toggle_model, write_outputs, write_summary, ExperimentConfig,
    ExperimentKind, ObservationSetup,
};
use cdkf_core::em::{default_init, run_em, EMOptions};
use cdkf_core::model::{ModelParams, TimedObservations};
use cdkf_core::simulate::{beta_steps, sample_trajectory, times_from_taus, uniform_breaks, ToggleRates};
use cdkf_core::Error;
use clap::{Parser, Subcommand};
use serde::Deserialize;

#[derive(Parser)]
#[command(
    name = "cdkf",
    version,
    about = "Continuous-discrete Kalman filtering and EM for irregularly sampled linear SDEs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a trajectory and write it as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the latent state columns x1..xn.
        #[arg(long)]
        emit_latent: bool,
    },
    /// Run continuous-discrete EM on a CSV of observations.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Seed for the random initialization of A and Qc.
        #[arg(long)]
        seed: Option<u64>,
        /// Output JSON report; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte-Carlo comparison and write records.csv and summary.csv.
    Experiment {
        #[command(subcommand)]
        kind: ExperimentCommand,
    },
    /// Recompute summary.csv from a records.csv file.
    Summarize {
        records: PathBuf,
        /// Output file; defaults to summary.csv next to the records.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ExperimentCommand {
    UniformBreaks(ExperimentArgs),
    BetaSteps(ExperimentArgs),
}

#[derive(clap::Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum StepSpec {
    UniformBreaks { total: f64, n: usize },
    BetaSteps { gamma: f64, n: usize, scale: f64 },
    Times { times: Vec<f64> },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    /// Explicit model; the toggle switch scaled by `omega` otherwise.
    model: Option<ModelParams>,
    #[serde(default = "one")]
    omega: f64,
    #[serde(default)]
    rates: ToggleRates,
    #[serde(default)]
    setup: ObservationSetup,
    steps: StepSpec,
}

fn one() -> f64 {
    1.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    /// CSV with a `t` column and `z1..zm`; relative to the config file.
    data: PathBuf,
    params: ModelParams,
    /// Replace `A` and `Qc` by the default random initialization.
    #[serde(default)]
    random_init: bool,
    #[serde(default)]
    em: EMOptions,
}

enum Failure {
    Config(String),
    Numerical(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            e if e.is_numerical() => Failure::Numerical(e.to_string()),
            Error::Io(io) => Failure::Io(io.to_string()),
            e => Failure::Config(e.to_string()),
        }
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn simulate(config: &Path, seed: u64, out: Option<&Path>, emit_latent: bool) -> Result<(), Failure> {
    let cfg: SimulateConfig = read_config(config)?;
    let params = match cfg.model {
        Some(p) => p.validated()?,
        None => toggle_model(&cfg.rates, &cfg.setup, cfg.omega)?,
    };
    let times = match cfg.steps {
        StepSpec::UniformBreaks { total, n } => times_from_taus(&uniform_breaks(total, n, seed)?),
        StepSpec::BetaSteps { gamma, n, scale } => times_from_taus(&beta_steps(gamma, n, scale, seed)?),
        StepSpec::Times { times } => times,
    };
    let traj = sample_trajectory(&params, &times, seed.wrapping_add(1))?;
    match out {
        Some(path) => traj.write_csv_file(path, emit_latent)?,
        None => traj.write_csv(std::io::stdout().lock(), emit_latent)?,
    }
    Ok(())
}

fn fit(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<(), Failure> {
    let cfg: FitConfig = read_config(config)?;
    let data_path = config.parent().unwrap_or(Path::new(".")).join(&cfg.data);
    let data = TimedObservations::read_csv(&data_path)?;
    let params = if cfg.random_init || seed.is_some() {
        default_init(&cfg.params, &data, seed.unwrap_or(0))?
    } else {
        cfg.params
    };
    let report = run_em(&params, &data, &cfg.em)?;
    let json = report.to_json()?;
    match out {
        Some(path) => fs::write(path, json).map_err(|e| Failure::Io(e.to_string()))?,
        None => println!("{json}"),
    }
    match report.failure {
        Some(reason) => Err(Failure::Numerical(format!("EM stopped after {} iterations: {reason}", report.iterations))),
        None => Ok(()),
    }
}

fn experiment(kind: ExperimentKind, args: &ExperimentArgs) -> Result<(), Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_toml(&text).map_err(|e| Failure::Config(e.to_string()))?
        }
        None => match kind {
            ExperimentKind::UniformBreaks => ExperimentConfig::uniform_breaks(),
            ExperimentKind::BetaSteps => ExperimentConfig::beta_steps(),
        },
    };
    if cfg.experiment != kind {
        return Err(Failure::Config("config describes a different experiment than the subcommand".into()));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    if args.threads.is_some() {
        cfg.threads = args.threads;
    }
    if args.out.is_some() {
        cfg.out = args.out.clone();
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    let records = run_experiment(&cfg)?;
    write_outputs(&out, &records)?;
    let failed: usize = records.iter().map(|r| r.failures).sum();
    eprintln!("{} records written to {} ({failed} failed fits)", records.len(), out.display());
    Ok(())
}

fn summarize_cmd(records: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let file = fs::File::open(records).map_err(|e| Failure::Config(format!("{}: {e}", records.display())))?;
    let recs = read_records(file).map_err(|e| Failure::Config(e.to_string()))?;
    let target = match out {
        Some(p) => p.to_path_buf(),
        None => records.with_file_name("summary.csv"),
    };
    let file = fs::File::create(&target).map_err(|e| Failure::Io(e.to_string()))?;
    write_summary(file, &summarize(&recs))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { config, seed, out, emit_latent } => simulate(config, *seed, out.as_deref(), *emit_latent),
        Command::Fit { config, seed, out } => fit(config, *seed, out.as_deref()),
        Command::Experiment { kind: ExperimentCommand::UniformBreaks(args) } => {
            experiment(ExperimentKind::UniformBreaks, args)
        }
        Command::Experiment { kind: ExperimentCommand::BetaSteps(args) } => experiment(ExperimentKind::BetaSteps, args),
        Command::Summarize { records, out } => summarize_cmd(records, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("i/o error: {msg}");
            ExitCode::from(1)
        }
    }
}
