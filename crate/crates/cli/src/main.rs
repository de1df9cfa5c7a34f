//! `bdp`: simulation, estimation and Monte Carlo experiments for composite
//! birth-death processes conditioned on survival.

mod config;
mod experiment;
mod io;
mod summary;
mod svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bdp_core::asymptotics::{
    fisher_information, fisher_information_marked, godambe, matrix_rows, pd_inverse, rn_derivative, rn_full_window,
    rn_limit_band,
};
use bdp_core::inference::{EstimatorKind, FitResult, SufficientStats};
use bdp_core::model::{ModelFile, ThetaFile};
use bdp_core::simulate::Trajectory;
use bdp_core::spectral::{SpectralDump, SpectralSnapshot};
use bdp_core::BdpError;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::{ConfigError, Experiment, ExperimentConfig, ModelRef, Resolved};
use experiment::Subcritical;

#[derive(Parser, Debug)]
#[command(name = "bdp", version, about = "Survival-conditioned inference for composite birth-death processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Worker threads (0 = all cores).
    #[arg(long, env = "BDP_JOBS", default_value_t = 0)]
    jobs: usize,
    /// Output directory (overrides the config's `output`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the Monte Carlo experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Base seed (overrides the config's `base_seed`).
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate one replicate and write its trajectory CSV and sidecar.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
        /// Index into the config's `horizons`.
        #[arg(long, default_value_t = 0)]
        horizon_index: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Fit one estimator to a trajectory file.
    Fit {
        #[arg(long)]
        trajectory: PathBuf,
        /// Config whose model replaces the one in the trajectory sidecar.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "conditional-mle")]
        estimator: EstimatorArg,
        /// Ignore birth marks even if the trajectory has them.
        #[arg(long)]
        unmarked: bool,
        #[command(flatten)]
        common: Common,
    },
    /// One-sided Wald test of `beta_i = 0` on a trajectory file.
    Test {
        #[arg(long)]
        trajectory: PathBuf,
        /// Tested mechanism, 1-based.
        #[arg(long)]
        mechanism: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        unmarked: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Dump spectral data, information matrices and RN-derivative traces.
    Diagnostics {
        #[arg(long)]
        config: PathBuf,
        /// Trajectory for the RN traces; one is simulated from the config if omitted.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Check that `summary.json` is recomputable from `replicates.csv`.
    Validate {
        /// Directory holding the run's outputs.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::ValueEnum, Debug, Clone, Copy)]
enum EstimatorArg {
    Naive,
    MarkedClosedForm,
    ConditionalMle,
    Qmle,
}

impl From<EstimatorArg> for EstimatorKind {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Naive => EstimatorKind::Naive,
            EstimatorArg::MarkedClosedForm => EstimatorKind::MarkedClosedForm,
            EstimatorArg::ConditionalMle => EstimatorKind::ConditionalMle,
            EstimatorArg::Qmle => EstimatorKind::Qmle,
        }
    }
}

/// Output of `bdp fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub estimator: EstimatorKind,
    pub marks: String,
    pub horizon: f64,
    pub theta_hat: ThetaFile,
    /// Reporting coordinates (`b_i = N^i beta_i` for SIS).
    pub scaled: Vec<f64>,
    pub se: Option<ThetaFile>,
    /// Information matrix behind `se`.
    pub information: Option<String>,
    pub fit: FitResult,
}

/// Output of `bdp test`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    /// Tested mechanism, 1-based.
    pub i: usize,
    pub z: f64,
    pub w: f64,
    pub se: f64,
    pub p: f64,
    pub levels: BTreeMap<String, bool>,
    pub boundary: bool,
    pub information: String,
    pub theta_hat: ThetaFile,
    pub horizon: f64,
}

fn set_jobs(jobs: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().context("starting the worker pool")
}

fn resolve_file(path: &Path, seed: Option<u64>) -> Result<Resolved> {
    let mut c = config::load(path)?;
    if let Some(s) = seed {
        c.base_seed = s;
    }
    config::resolve(c)
}

fn out_dir(common: &Common, res: Option<&Resolved>) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| res.and_then(|r| r.config.output.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Writes `value` to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_json<T: Serialize>(value: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

/// A resolved setting for a trajectory file: the sidecar's model unless a config overrides it.
fn resolve_for_trajectory(traj: &Trajectory, meta: &io::TrajectoryMeta, config: Option<&Path>) -> Result<Resolved> {
    // The sidecar parameter is provenance only; a null-generated one sits on the boundary.
    let zero = meta.theta.beta.iter().position(|b| *b == 0.0);
    let res = match config {
        Some(p) => resolve_file(p, None)?,
        None => config::resolve(ExperimentConfig {
            experiment: if zero.is_some() { Experiment::NullTest } else { Experiment::Consistency },
            model: ModelRef::Inline(meta.model.clone()),
            theta0: Some(meta.theta.clone()),
            x0: meta.x0,
            horizons: vec![meta.horizon],
            replicates: 1,
            base_seed: meta.seed,
            marked: meta.marked,
            estimators: Vec::new(),
            output: None,
            sampling: meta.sampling,
            max_attempts: 1,
            survival_horizon: None,
            mechanism: zero.map(|i| i + 1),
            levels: bdp_core::asymptotics::DEFAULT_LEVELS.to_vec(),
            information: Default::default(),
            multistart: 0,
            rn_time: None,
        })?,
    };
    if res.spec.capacity() != traj.capacity {
        bail!(ConfigError(format!("model has N = {} but the trajectory has N = {}", res.spec.capacity(), traj.capacity)));
    }
    Ok(res)
}

fn load_stats(path: &Path, config: Option<&Path>, unmarked: bool) -> Result<(Resolved, SufficientStats, io::TrajectoryMeta)> {
    let (traj, meta) = io::read_trajectory(path)?;
    let res = resolve_for_trajectory(&traj, &meta, config)?;
    let stats = SufficientStats::from_trajectory(&traj, res.spec.mechanisms())?;
    let stats = if unmarked { stats.unmarked() } else { stats };
    Ok((res, stats, meta))
}

fn theta_file(v: &[f64]) -> ThetaFile {
    ThetaFile { beta: v[..v.len() - 1].to_vec(), mu: v[v.len() - 1] }
}

fn cmd_fit(path: &Path, config: Option<&Path>, estimator: EstimatorKind, unmarked: bool, common: &Common) -> Result<()> {
    let (res, stats, _) = load_stats(path, config, unmarked)?;
    let est = experiment::estimate(&res, estimator, &stats, None)?;
    let theta = &est.fit.theta_hat;
    let report = FitReport {
        estimator: est.fit.kind,
        marks: if stats.is_marked() { "marked" } else { "unmarked" }.into(),
        horizon: stats.horizon,
        theta_hat: ThetaFile { beta: theta.beta.clone(), mu: theta.mu },
        scaled: theta.beta.iter().enumerate().map(|(i, b)| b * res.beta_scale(i)).collect(),
        se: est.se.as_deref().map(theta_file),
        information: est.information.map(String::from),
        fit: est.fit.clone(),
    };
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir)?;
        io::write_json(&dir.join("fit.json"), &report)?;
    }
    print_json(&report)
}

fn cmd_test(path: &Path, mechanism: usize, config: Option<&Path>, unmarked: bool, common: &Common) -> Result<()> {
    let (res, stats, _) = load_stats(path, config, unmarked)?;
    if mechanism == 0 || mechanism > res.spec.mechanisms() {
        bail!(ConfigError(format!("--mechanism must lie in 1..={}", res.spec.mechanisms())));
    }
    let est = experiment::estimate(&res, EstimatorKind::ConditionalMle, &stats, Some(mechanism - 1))?;
    let wald = est.wald.context("Wald test was not computed")?;
    let theta = &est.fit.theta_hat;
    let report = TestReport {
        i: mechanism,
        z: wald.z,
        w: wald.w,
        se: wald.se,
        p: wald.p_one_sided,
        levels: wald.reject_at,
        boundary: wald.boundary,
        information: est.information.unwrap_or("observed").into(),
        theta_hat: ThetaFile { beta: theta.beta.clone(), mu: theta.mu },
        horizon: stats.horizon,
    };
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir)?;
        io::write_json(&dir.join("test.json"), &report)?;
    }
    print_json(&report)
}

fn cmd_simulate(res: &Resolved, replicate: u64, horizon_index: usize, common: &Common) -> Result<()> {
    let Some(&horizon) = res.config.horizons.get(horizon_index) else {
        bail!(ConfigError(format!("--horizon-index {horizon_index} is out of range")));
    };
    let d = experiment::draw(res, horizon, res.config.base_seed, experiment::stream_id(res, horizon_index, replicate))?;
    let dir = out_dir(common, Some(res));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("trajectory_s{}_r{replicate}.csv", res.config.base_seed));
    io::write_trajectory(&path, &d.trajectory, &experiment::trajectory_meta(res, &d, horizon))?;
    print_json(&serde_json::json!({
        "trajectory": path,
        "events": d.trajectory.events.len(),
        "attempts": d.attempts,
        "final_state": d.trajectory.final_state(),
    }))
}

#[derive(Serialize)]
struct InformationDump {
    fisher: Vec<Vec<f64>>,
    fisher_marked: Vec<Vec<f64>>,
    j: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    godambe: Vec<Vec<f64>>,
    mle_covariance: Vec<Vec<f64>>,
    qmle_covariance: Vec<Vec<f64>>,
    fisher_condition: f64,
    fisher_min_eigenvalue: f64,
}

#[derive(Serialize)]
struct RnPoint {
    t: f64,
    value: f64,
    absorbed: bool,
}

#[derive(Serialize)]
struct DiagnosticsReport {
    model: ModelFile,
    theta: ThetaFile,
    spectral: SpectralDump,
    information: Option<InformationDump>,
    /// Reason the information matrices are missing, if they are.
    information_error: Option<String>,
    rn_band: (f64, f64),
    horizon: f64,
    rn_fixed_window: Vec<RnPoint>,
    rn_full_window: RnPoint,
}

fn information_dump(res: &Resolved) -> Result<InformationDump, BdpError> {
    let m = godambe(&res.spec, &res.theta0)?;
    let inv = pd_inverse(&m.fisher)?;
    Ok(InformationDump {
        fisher: matrix_rows(&fisher_information(&res.spec, &res.theta0)?),
        fisher_marked: matrix_rows(&fisher_information_marked(&res.spec, &res.theta0)?),
        j: matrix_rows(&m.j),
        h: matrix_rows(&m.h),
        godambe: matrix_rows(&m.godambe),
        mle_covariance: matrix_rows(&inv.inverse),
        qmle_covariance: matrix_rows(&m.sandwich()?),
        fisher_condition: inv.condition,
        fisher_min_eigenvalue: inv.min_eigenvalue,
    })
}

fn cmd_diagnostics(res: &Resolved, trajectory: Option<&Path>, common: &Common) -> Result<()> {
    let horizon = res.horizon();
    let traj = match trajectory {
        Some(p) => io::read_trajectory(p)?.0,
        None => experiment::draw(res, horizon, res.config.base_seed, 0)?.trajectory,
    };
    let horizon = horizon.min(traj.horizon);
    let snap = SpectralSnapshot::new(&res.spec, &res.theta0, false)?;
    let (information, information_error) = match information_dump(res) {
        Ok(d) => (Some(d), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let steps = 20;
    let rn_fixed_window = (0..=steps)
        .map(|i| {
            let t = horizon * i as f64 / steps as f64;
            rn_derivative(&res.spec, &res.theta0, &traj, t, horizon).map(|v| RnPoint { t, value: v.value, absorbed: v.absorbed })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let full = rn_full_window(&res.spec, &res.theta0, &traj, horizon)?;
    let report = DiagnosticsReport {
        model: res.model.clone(),
        theta: ThetaFile { beta: res.theta0.beta.clone(), mu: res.theta0.mu },
        spectral: SpectralDump::new(&snap.spectral, &snap.tilted),
        information,
        information_error,
        rn_band: rn_limit_band(&res.spec, &res.theta0)?,
        horizon,
        rn_fixed_window,
        rn_full_window: RnPoint { t: horizon, value: full.value, absorbed: full.absorbed },
    };
    let dir = out_dir(common, Some(res));
    std::fs::create_dir_all(&dir)?;
    io::write_json(&dir.join("diagnostics.json"), &report)?;
    print_json(&serde_json::json!({ "diagnostics": dir.join("diagnostics.json") }))
}

/// Raised by `validate` when the summary and the replicate table disagree.
#[derive(Debug)]
struct ValidationError(String);

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

fn cmd_validate(dir: &Path) -> Result<()> {
    let summary: summary::Summary = io::read_json(&dir.join("summary.json"))?;
    let (_, rows) = io::read_rows(&dir.join("replicates.csv"))?;
    let checked = summary::validate(&summary, &rows).map_err(|e| ValidationError(e.to_string()))?;
    print_json(&serde_json::json!({ "valid": true, "values_checked": checked, "rows": rows.len() }))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, common } => {
            set_jobs(common.jobs)?;
            let res = resolve_file(&config, seed)?;
            let dir = out_dir(&common, Some(&res));
            let summary = experiment::run(&res, &dir)?;
            let rows: usize = summary.groups.iter().map(|g| g.rows).sum();
            let errors: usize = summary.groups.iter().map(|g| g.errors).sum();
            print_json(&serde_json::json!({ "out": dir, "rows": rows, "errors": errors }))
        }
        Command::Simulate { config, seed, replicate, horizon_index, common } => {
            let res = resolve_file(&config, seed)?;
            cmd_simulate(&res, replicate, horizon_index, &common)
        }
        Command::Fit { trajectory, config, estimator, unmarked, common } => {
            cmd_fit(&trajectory, config.as_deref(), estimator.into(), unmarked, &common)
        }
        Command::Test { trajectory, mechanism, config, unmarked, common } => {
            cmd_test(&trajectory, mechanism, config.as_deref(), unmarked, &common)
        }
        Command::Diagnostics { config, trajectory, seed, common } => {
            let res = resolve_file(&config, seed)?;
            cmd_diagnostics(&res, trajectory.as_deref(), &common)
        }
        Command::Validate { out } => cmd_validate(&out),
    }
}

/// Machine-readable error kind and exit code.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<BdpError>() {
            return (e.kind(), 1);
        }
        if cause.is::<ConfigError>() || cause.is::<serde_json::Error>() {
            return ("config", 2);
        }
        if cause.is::<Subcritical>() {
            return ("subcritical", 3);
        }
        if cause.is::<ValidationError>() {
            return ("validation", 4);
        }
    }
    ("io", 1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = classify(&err);
            let body = serde_json::json!({ "error": kind, "message": format!("{err:#}") });
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}
