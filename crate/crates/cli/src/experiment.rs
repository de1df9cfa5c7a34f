//! Replicate orchestration for `bdp run`.
//!
//! Replicate `r` at horizon index `h` draws from stream id `h * R + r`, so every
//! path is a function of `(base_seed, h, r)` alone. Workers return rows by value
//! and the orchestrator writes them in replicate order.

use std::path::Path;

use anyhow::{bail, Context, Result};
use bdp_core::asymptotics::{
    fisher_information, fisher_information_marked, fisher_information_observed, godambe, normal_cdf, normal_quantile, pd_inverse,
    rn_derivative, rn_full_window, rn_limit_band, wald_test_levels, WaldResult,
};
use bdp_core::inference::{
    default_init, fit_conditional_mle, fit_qmle, mle_marked_closed_form, mle_unconditional, EstimatorKind, FitOptions,
    FitResult, SufficientStats,
};
use bdp_core::model::{ParamSpace, ThetaFile};
use bdp_core::rng::RngStream;
use bdp_core::simulate::{simulate_q_process, simulate_survival_conditioned, ConditioningOptions, Trajectory};
use bdp_core::spectral::{SpectralDump, SpectralSnapshot};
use bdp_core::BdpError;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Experiment, InfoSource, Resolved, Sampling};
use crate::io::{self, Row, TrajectoryMeta};
use crate::summary::{self, Coord, Summary};
use crate::svg::{Plot, Series, Style};

/// One line of `errors.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRecord {
    pub replicate: u64,
    pub horizon: f64,
    pub stage: String,
    pub kind: String,
    pub message: String,
}

/// A simulated observation window.
#[derive(Debug, Clone)]
pub struct Draw {
    pub trajectory: Trajectory,
    pub attempts: usize,
    pub stream: RngStream,
}

pub fn stream_id(res: &Resolved, horizon_index: usize, replicate: u64) -> u64 {
    horizon_index as u64 * res.config.replicates + replicate
}

pub fn draw(res: &Resolved, horizon: f64, seed: u64, stream_id: u64) -> Result<Draw, BdpError> {
    let stream = RngStream::new(seed, stream_id);
    let c = &res.config;
    let (trajectory, attempts) = match c.sampling {
        Sampling::Survival => {
            let options = ConditioningOptions { max_attempts: c.max_attempts, survival_horizon: c.survival_horizon };
            let t = simulate_survival_conditioned(&res.spec, &res.theta0, c.x0, horizon, &stream, c.marked, options)?;
            (t.trajectory, t.attempts)
        }
        Sampling::QProcess => (simulate_q_process(&res.spec, &res.theta0, c.x0, horizon, &stream, c.marked)?, 1),
    };
    Ok(Draw { trajectory, attempts, stream })
}

pub fn trajectory_meta(res: &Resolved, d: &Draw, horizon: f64) -> TrajectoryMeta {
    TrajectoryMeta {
        seed: d.stream.base_seed,
        replicate: d.stream.replicate_id,
        attempts: d.attempts,
        sampling: res.config.sampling,
        model: res.model.clone(),
        theta: ThetaFile { beta: res.theta0.beta.clone(), mu: res.theta0.mu },
        x0: res.config.x0,
        horizon,
        absorbed_at: d.trajectory.absorbed_at,
        marked: d.trajectory.marked,
    }
}

/// A fit with its standard errors and (for tests) the Wald statistic.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub fit: FitResult,
    /// Standard errors of `(beta, mu)`.
    pub se: Option<Vec<f64>>,
    /// Which information matrix produced `se`.
    pub information: Option<&'static str>,
    pub wald: Option<WaldResult>,
}

fn standard_errors(cov: &nalgebra::DMatrix<f64>, horizon: f64) -> Vec<f64> {
    (0..cov.nrows()).map(|a| (cov[(a, a)] / horizon).sqrt()).collect()
}

/// Runs one estimator on one view of the data.
///
/// `test` puts the fit on the enlarged space for that (zero-based) mechanism and
/// adds the one-sided Wald test.
pub fn estimate(
    res: &Resolved,
    kind: EstimatorKind,
    stats: &SufficientStats,
    test: Option<usize>,
) -> Result<Estimate, BdpError> {
    let spec = &res.spec;
    let horizon = stats.horizon;
    let opts = FitOptions {
        space: test.map_or(ParamSpace::Estimation, ParamSpace::Test),
        multistart: res.config.multistart,
        ..FitOptions::default()
    };
    let fit = match kind {
        EstimatorKind::Naive if stats.is_marked() => mle_marked_closed_form(stats, spec)?,
        EstimatorKind::MarkedClosedForm => mle_marked_closed_form(stats, spec)?,
        EstimatorKind::Naive => mle_unconditional(stats, spec, &default_init(stats, spec)?, &opts)?,
        EstimatorKind::ConditionalMle => fit_conditional_mle(stats, spec, &default_init(stats, spec)?, &opts)?,
        EstimatorKind::Qmle => fit_qmle(stats, spec, &default_init(stats, spec)?, &opts)?,
    };
    let (info, source) = match kind {
        EstimatorKind::ConditionalMle => match res.config.information {
            InfoSource::Observed => (Some(fisher_information_observed(stats, spec, &fit.theta_hat)?), "observed"),
            InfoSource::Population if stats.is_marked() => (Some(fisher_information_marked(spec, &fit.theta_hat)?), "population"),
            InfoSource::Population => (Some(fisher_information(spec, &fit.theta_hat)?), "population"),
        },
        _ => (None, "none"),
    };
    let (se, information) = match (&info, kind) {
        (Some(i), _) => (Some(standard_errors(&pd_inverse(i)?.inverse, horizon)), Some(source)),
        // QMLE: Godambe sandwich at the estimate.
        (None, EstimatorKind::Qmle) => (Some(standard_errors(&godambe(spec, &fit.theta_hat)?.sandwich()?, horizon)), Some("population")),
        _ => (None, None),
    };
    let wald = match (test, &info) {
        (Some(i), Some(info)) => Some(wald_test_levels(&fit, info, horizon, i, &res.config.levels)?),
        _ => None,
    };
    Ok(Estimate { fit, se, information, wald })
}

fn error_record(replicate: u64, horizon: f64, stage: &str, e: &BdpError) -> ErrorRecord {
    ErrorRecord { replicate, horizon, stage: stage.into(), kind: e.kind().into(), message: e.to_string() }
}

fn estimate_row(res: &Resolved, base: &Row, marks: &str, kind: EstimatorKind, est: &Estimate) -> Row {
    let theta = &est.fit.theta_hat;
    let k = res.spec.mechanisms();
    let truth = res.theta0.to_vec();
    let covered = match &est.se {
        Some(se) => (0..=k).map(|a| Some((theta.get(a) - truth[a]).abs() <= normal_quantile(0.975) * se[a])).collect(),
        None => vec![None; k + 1],
    };
    let flagged = !est.fit.converged || !est.fit.flags.is_empty();
    Row {
        marks: marks.into(),
        estimator: kind.as_str().into(),
        status: if flagged { "flagged" } else { "ok" }.into(),
        converged: Some(est.fit.converged),
        iterations: Some(est.fit.iterations),
        flags: est.fit.flags.iter().map(|f| serde_json::to_value(f).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()).collect::<Vec<_>>().join("|"),
        beta: theta.beta.iter().map(|b| Some(*b)).collect(),
        mu: Some(theta.mu),
        scaled: theta.beta.iter().enumerate().map(|(i, b)| Some(b * res.beta_scale(i))).collect(),
        se: est.se.as_ref().map(|s| s.iter().map(|x| Some(*x)).collect()).unwrap_or_default(),
        covered,
        z: est.wald.as_ref().map(|w| w.z),
        w: est.wald.as_ref().map(|w| w.w),
        p: est.wald.as_ref().map(|w| w.p_one_sided),
        ..base.clone()
    }
}

struct ReplicateOutput {
    rows: Vec<Row>,
    errors: Vec<ErrorRecord>,
    rejection_exhausted: bool,
    path: Option<(Trajectory, TrajectoryMeta)>,
}

fn run_replicate(res: &Resolved, horizon_index: usize, replicate: u64) -> ReplicateOutput {
    let horizon = res.config.horizons[horizon_index];
    let mut out = ReplicateOutput { rows: Vec::new(), errors: Vec::new(), rejection_exhausted: false, path: None };
    let base = Row { replicate, horizon, ..Row::default() };
    let d = match draw(res, horizon, res.config.base_seed, stream_id(res, horizon_index, replicate)) {
        Ok(d) => d,
        Err(e) => {
            out.rejection_exhausted = matches!(e, BdpError::RejectionBudget { .. });
            out.errors.push(error_record(replicate, horizon, "simulate", &e));
            out.rows.push(Row { status: "error".into(), ..base });
            return out;
        }
    };
    let base = Row {
        attempts: Some(d.attempts),
        events: Some(d.trajectory.events.len()),
        final_state: Some(d.trajectory.final_state()),
        ..base
    };
    match res.config.experiment {
        Experiment::Trajectory => {
            out.rows.push(Row { status: "ok".into(), ..base });
            out.path = Some((d.trajectory.clone(), trajectory_meta(res, &d, horizon)));
        }
        Experiment::Diagnostics => {
            let t = res.config.rn_time.unwrap_or(horizon / 2.0).min(horizon);
            let full = rn_full_window(&res.spec, &res.theta0, &d.trajectory, horizon);
            let fixed = rn_derivative(&res.spec, &res.theta0, &d.trajectory, t, horizon);
            match (full, fixed) {
                (Ok(full), Ok(fixed)) => out.rows.push(Row {
                    status: if full.absorbed || fixed.absorbed { "flagged" } else { "ok" }.into(),
                    rn_full: Some(full.value),
                    rn_fixed: Some(fixed.value),
                    ..base
                }),
                (Err(e), _) | (_, Err(e)) => {
                    out.errors.push(error_record(replicate, horizon, "diagnostics", &e));
                    out.rows.push(Row { status: "error".into(), ..base });
                }
            }
        }
        _ => {
            let stats = match SufficientStats::from_trajectory(&d.trajectory, res.spec.mechanisms()) {
                Ok(s) => s,
                Err(e) => {
                    out.errors.push(error_record(replicate, horizon, "statistics", &e));
                    out.rows.push(Row { status: "error".into(), ..base });
                    return out;
                }
            };
            let mut views = vec![("unmarked", stats.unmarked())];
            if stats.is_marked() {
                views.push(("marked", stats));
            }
            let test = if res.config.experiment == Experiment::NullTest { res.tested() } else { None };
            for (marks, view) in &views {
                for kind in res.estimators() {
                    if kind == EstimatorKind::MarkedClosedForm && !view.is_marked() {
                        continue;
                    }
                    // Tests apply to the conditional MLE only.
                    let test = if kind == EstimatorKind::ConditionalMle { test } else { None };
                    match estimate(res, kind, view, test) {
                        Ok(est) => out.rows.push(estimate_row(res, &base, marks, kind, &est)),
                        Err(e) => {
                            out.errors.push(error_record(replicate, horizon, kind.as_str(), &e));
                            out.rows.push(Row { marks: (*marks).into(), estimator: kind.as_str().into(), status: "error".into(), ..base.clone() });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Raised when more than half of a horizon's replicates exhaust the rejection budget.
#[derive(Debug)]
pub struct Subcritical {
    pub horizon: f64,
    pub exhausted: u64,
    pub replicates: u64,
}

impl std::fmt::Display for Subcritical {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "rejection budget exhausted for {}/{} replicates at T = {}; survival to T is too rare (subcritical regime?)",
            self.exhausted, self.replicates, self.horizon
        )
    }
}

impl std::error::Error for Subcritical {}

pub fn truth_coords(res: &Resolved) -> Vec<Coord> {
    let scaled = matches!(res.model.family, bdp_core::model::Family::Sis);
    let mut v: Vec<Coord> = res
        .theta0
        .beta
        .iter()
        .enumerate()
        .map(|(i, b)| Coord { name: if scaled { format!("b_{}", i + 1) } else { format!("beta_{}", i + 1) }, value: b * res.beta_scale(i) })
        .collect();
    v.push(Coord { name: "mu".into(), value: res.theta0.mu });
    v
}

/// Runs the configured experiment and writes every artifact into `out`.
pub fn run(res: &Resolved, out: &Path) -> Result<Summary> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let c = &res.config;
    let work: Vec<(usize, u64)> = (0..c.horizons.len()).flat_map(|h| (0..c.replicates).map(move |r| (h, r))).collect();
    let results: Vec<ReplicateOutput> = work.par_iter().map(|&(h, r)| run_replicate(res, h, r)).collect();

    let mut errors_file = String::new();
    for e in results.iter().flat_map(|r| &r.errors) {
        errors_file.push_str(&serde_json::to_string(e)?);
        errors_file.push('\n');
    }
    std::fs::write(out.join("errors.jsonl"), &errors_file)?;
    for (h, &horizon) in c.horizons.iter().enumerate() {
        let exhausted = work.iter().zip(&results).filter(|((hh, _), r)| *hh == h && r.rejection_exhausted).count() as u64;
        if 2 * exhausted > c.replicates {
            return Err(Subcritical { horizon, exhausted, replicates: c.replicates }.into());
        }
    }

    let rows: Vec<Row> = results.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    let k = res.spec.mechanisms();
    io::write_rows(&out.join("replicates.csv"), k, &rows)?;
    let truth = truth_coords(res);
    let summary = Summary {
        experiment: c.experiment,
        base_seed: c.base_seed,
        replicates: c.replicates,
        truth: truth.clone(),
        levels: c.levels.clone(),
        information: match c.information {
            InfoSource::Observed => "observed",
            InfoSource::Population => "population",
        }
        .into(),
        groups: summary::groups(&rows, &truth, &c.levels),
    };
    io::write_json(&out.join("summary.json"), &summary)?;

    match c.experiment {
        Experiment::Trajectory => write_trajectories(res, out, &results)?,
        Experiment::BiasNaive | Experiment::Consistency => write_scatter(res, out, &rows, &truth)?,
        Experiment::EstimatorMeans => write_means(out, &summary)?,
        Experiment::NullTest => write_null(out, &rows)?,
        Experiment::Diagnostics => write_diagnostics(res, out, &rows)?,
    }
    Ok(summary)
}

fn horizon_tag(t: f64) -> String {
    format!("T{t}")
}

fn write_trajectories(res: &Resolved, out: &Path, results: &[ReplicateOutput]) -> Result<()> {
    let dir = out.join("trajectories");
    std::fs::create_dir_all(&dir)?;
    let mut plot = Plot::new("Sample trajectories", "time", "state");
    for r in results {
        let Some((traj, meta)) = &r.path else { continue };
        let name = format!("{}_r{:04}.csv", horizon_tag(meta.horizon), r.rows[0].replicate);
        io::write_trajectory(&dir.join(name), traj, meta)?;
        if meta.horizon == res.horizon() && plot.series.len() < 20 {
            let mut pts = vec![(0.0, traj.x0 as f64)];
            pts.extend(traj.events.iter().zip(traj.states_after()).map(|(e, s)| (e.t, s as f64)));
            pts.push((traj.absorbed_at.unwrap_or(meta.horizon), traj.final_state() as f64));
            plot.series.push(Series::new(format!("replicate {}", r.rows[0].replicate), Style::Step, pts));
        }
    }
    std::fs::write(out.join("plot_trajectories.svg"), plot.render())?;
    Ok(())
}

/// Scatter coordinates: the first two reporting coordinates.
fn scatter_axes(truth: &[Coord]) -> (usize, usize) {
    (0, 1.min(truth.len() - 1))
}

fn coordinate(row: &Row, a: usize, k: usize) -> Option<f64> {
    if a < k {
        row.scaled.get(a).copied().flatten()
    } else {
        row.mu
    }
}

fn write_scatter(res: &Resolved, out: &Path, rows: &[Row], truth: &[Coord]) -> Result<()> {
    let k = res.spec.mechanisms();
    let (ax, ay) = scatter_axes(truth);
    for &horizon in &res.config.horizons {
        let mut w = csv::Writer::from_path(out.join(format!("scatter_{}.csv", horizon_tag(horizon))))?;
        let mut header = vec!["replicate".to_string(), "marks".into(), "estimator".into()];
        header.extend(truth.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        let live: Vec<&Row> = rows.iter().filter(|r| r.horizon == horizon && r.status != "error" && !r.estimator.is_empty()).collect();
        for r in &live {
            let mut rec = vec![r.replicate.to_string(), r.marks.clone(), r.estimator.clone()];
            rec.extend((0..truth.len()).map(|a| coordinate(r, a, k).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        for marks in ["unmarked", "marked"] {
            let mut plot = Plot::new(format!("Estimates, T = {horizon} ({marks})"), &truth[ax].name, &truth[ay].name);
            plot.marker = Some((truth[ax].value, truth[ay].value));
            for kind in res.estimators() {
                let pts: Vec<(f64, f64)> = live
                    .iter()
                    .filter(|r| r.marks == marks && r.estimator == kind.as_str())
                    .filter_map(|r| Some((coordinate(r, ax, k)?, coordinate(r, ay, k)?)))
                    .collect();
                if !pts.is_empty() {
                    plot.series.push(Series::new(kind.as_str(), Style::Points, pts));
                }
            }
            if !plot.series.is_empty() {
                std::fs::write(out.join(format!("plot_scatter_{}_{marks}.svg", horizon_tag(horizon))), plot.render())?;
            }
        }
    }
    Ok(())
}

fn write_means(out: &Path, summary: &Summary) -> Result<()> {
    for coord in &summary.truth {
        let mut plot = Plot::new(format!("Sample means of {}", coord.name), "T", &coord.name);
        plot.hlines.push(coord.value);
        let mut labels: Vec<(String, String)> = Vec::new();
        for g in &summary.groups {
            let key = (g.estimator.clone(), g.marks.clone());
            if !labels.contains(&key) {
                labels.push(key);
            }
        }
        for (estimator, marks) in labels {
            let pts: Vec<(f64, f64)> = summary
                .groups
                .iter()
                .filter(|g| g.estimator == estimator && g.marks == marks)
                .filter_map(|g| Some((g.horizon, g.coords.iter().find(|c| c.name == coord.name)?.mean?)))
                .collect();
            plot.series.push(Series::new(format!("{estimator} ({marks})"), Style::Line, pts.clone()));
        }
        std::fs::write(out.join(format!("plot_means_{}.svg", coord.name)), plot.render())?;
    }
    Ok(())
}

const Z_BIN: f64 = 0.25;

fn write_null(out: &Path, rows: &[Row]) -> Result<()> {
    let z: Vec<f64> = rows.iter().filter_map(|r| r.z).collect();
    if z.is_empty() {
        bail!("null-test produced no Wald statistics");
    }
    let lo = (z.iter().copied().fold(-4.0, f64::min) / Z_BIN).floor() * Z_BIN;
    let hi = (z.iter().copied().fold(4.0, f64::max) / Z_BIN).ceil() * Z_BIN;
    let bins = ((hi - lo) / Z_BIN).round() as usize;
    let mut counts = vec![0usize; bins];
    for v in &z {
        let i = (((v - lo) / Z_BIN) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let n = z.len() as f64;
    let mut w = csv::Writer::from_path(out.join("z_histogram.csv"))?;
    w.write_record(["bin_lo", "bin_hi", "count", "density", "normal_density"])?;
    let mut bars = Vec::new();
    let mut curve = Vec::new();
    for (i, c) in counts.iter().enumerate() {
        let a = lo + i as f64 * Z_BIN;
        let density = *c as f64 / (n * Z_BIN);
        // Bin-averaged N(0, 1) density, the overlay the histogram should match.
        let normal = (normal_cdf(a + Z_BIN) - normal_cdf(a)) / Z_BIN;
        w.write_record([a.to_string(), (a + Z_BIN).to_string(), c.to_string(), density.to_string(), normal.to_string()])?;
        bars.push((a, density));
        curve.push((a + 0.5 * Z_BIN, normal));
    }
    w.flush()?;
    let plot = Plot::new("Null distribution of Z", "Z", "density")
        .with(Series::new("empirical", Style::Bars { width: Z_BIN }, bars))
        .with(Series::new("N(0,1)", Style::Line, curve));
    std::fs::write(out.join("plot_null_z.svg"), plot.render())?;
    Ok(())
}

#[derive(Serialize)]
struct DiagnosticsFile {
    spectral: SpectralDump,
    rn_band: (f64, f64),
}

fn write_diagnostics(res: &Resolved, out: &Path, rows: &[Row]) -> Result<()> {
    let snap = SpectralSnapshot::new(&res.spec, &res.theta0, false)?;
    let band = rn_limit_band(&res.spec, &res.theta0)?;
    io::write_json(&out.join("diagnostics.json"), &DiagnosticsFile { spectral: SpectralDump::new(&snap.spectral, &snap.tilted), rn_band: band })?;
    for &horizon in &res.config.horizons {
        let values: Vec<f64> = rows.iter().filter(|r| r.horizon == horizon).filter_map(|r| r.rn_full).filter(|v| *v > 0.0).collect();
        if values.is_empty() {
            continue;
        }
        let lo = values.iter().copied().fold(band.0, f64::min);
        let hi = values.iter().copied().fold(band.1, f64::max);
        let bins = 30;
        let width = ((hi - lo) / bins as f64).max(1e-12);
        let mut counts = vec![0usize; bins];
        for v in &values {
            counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
        let bars = counts.iter().enumerate().map(|(i, c)| (lo + i as f64 * width, *c as f64)).collect();
        let mut plot = Plot::new(format!("Full-window RN derivative, T = {horizon}"), "value", "count")
            .with(Series::new("paths", Style::Bars { width }, bars))
            .with(Series::new("limit band", Style::Points, vec![(band.0, 0.0), (band.1, 0.0)]));
        plot.hlines.push(0.0);
        std::fs::write(out.join(format!("plot_rn_{}.svg", horizon_tag(horizon))), plot.render())?;
    }
    Ok(())
}
