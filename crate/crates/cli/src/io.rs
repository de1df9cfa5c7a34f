//! File formats: trajectory CSV + sidecar, the replicate table, JSON helpers.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bdp_core::model::{ModelFile, ThetaFile};
use bdp_core::simulate::{Direction, Event, Trajectory};
use serde::{Deserialize, Serialize};

use crate::config::Sampling;

pub const TRAJECTORY_HEADER: [&str; 4] = ["t", "direction", "mark", "state_after"];

/// Metadata written next to a trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub replicate: u64,
    pub attempts: usize,
    pub sampling: Sampling,
    pub model: ModelFile,
    pub theta: ThetaFile,
    pub x0: usize,
    pub horizon: f64,
    pub absorbed_at: Option<f64>,
    pub marked: bool,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes `path` (CSV, marks 1-based) and its JSON sidecar.
pub fn write_trajectory(path: &Path, traj: &Trajectory, meta: &TrajectoryMeta) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(TRAJECTORY_HEADER)?;
    for (e, state) in traj.events.iter().zip(traj.states_after()) {
        let direction = match e.direction {
            Direction::Birth => "birth",
            Direction::Death => "death",
        };
        let mark = e.mark.map(|m| (m + 1).to_string()).unwrap_or_default();
        w.write_record([e.t.to_string(), direction.to_string(), mark, state.to_string()])?;
    }
    w.flush()?;
    write_json(&sidecar_path(path), meta)
}

pub fn read_trajectory(path: &Path) -> Result<(Trajectory, TrajectoryMeta)> {
    let meta: TrajectoryMeta = read_json(&sidecar_path(path))?;
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    if r.headers()?.iter().collect::<Vec<_>>() != TRAJECTORY_HEADER {
        bail!("{}: expected header {}", path.display(), TRAJECTORY_HEADER.join(","));
    }
    let mut events = Vec::new();
    let mut state = meta.x0;
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let t: f64 = record[0].parse().with_context(|| format!("row {}: bad time", line + 1))?;
        let direction = match &record[1] {
            "birth" => Direction::Birth,
            "death" => Direction::Death,
            other => bail!("row {}: unknown direction {other:?}", line + 1),
        };
        let mark = match &record[2] {
            "" => None,
            m => Some(m.parse::<usize>().with_context(|| format!("row {}: bad mark", line + 1))?.checked_sub(1).context("marks are 1-based")?),
        };
        state = match direction {
            Direction::Birth => state + 1,
            Direction::Death => state.checked_sub(1).context("state went negative")?,
        };
        let recorded: usize = record[3].parse().with_context(|| format!("row {}: bad state", line + 1))?;
        if recorded != state {
            bail!("row {}: state_after {recorded} does not follow from the jumps (expected {state})", line + 1);
        }
        events.push(Event { t, direction, mark });
    }
    let traj = Trajectory {
        capacity: meta.model.n,
        x0: meta.x0,
        horizon: meta.horizon,
        events,
        absorbed_at: meta.absorbed_at,
        marked: meta.marked,
    };
    traj.validate()?;
    Ok((traj, meta))
}

/// One row of `replicates.csv`: one estimator (or one path) on one replicate.
///
/// Absent values are written as empty cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Row {
    pub replicate: u64,
    pub horizon: f64,
    /// `marked` or `unmarked` view of the path; empty when no estimator ran.
    pub marks: String,
    pub estimator: String,
    /// `ok`, `flagged` or `error`.
    pub status: String,
    pub attempts: Option<usize>,
    pub events: Option<usize>,
    pub final_state: Option<usize>,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    /// `|`-separated fit flags.
    pub flags: String,
    pub beta: Vec<Option<f64>>,
    pub mu: Option<f64>,
    pub scaled: Vec<Option<f64>>,
    /// Standard errors of `(beta, mu)`.
    pub se: Vec<Option<f64>>,
    /// Nominal 95% interval covers the truth, per coordinate of `(beta, mu)`.
    pub covered: Vec<Option<bool>>,
    pub z: Option<f64>,
    pub w: Option<f64>,
    pub p: Option<f64>,
    pub rn_full: Option<f64>,
    pub rn_fixed: Option<f64>,
}

pub fn row_header(k: usize) -> Vec<String> {
    let mut h: Vec<String> = ["replicate", "horizon", "marks", "estimator", "status", "attempts", "events", "final_state", "converged", "iterations", "flags"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=k).map(|i| format!("beta_{i}")));
    h.push("mu".into());
    h.extend((1..=k).map(|i| format!("b_{i}")));
    h.extend((1..=k).map(|i| format!("se_beta_{i}")));
    h.push("se_mu".into());
    h.extend((1..=k).map(|i| format!("covered_beta_{i}")));
    h.push("covered_mu".into());
    h.extend(["z", "w", "p", "rn_full", "rn_fixed"].iter().map(|s| s.to_string()));
    h
}

fn cell<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<Option<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    if s.is_empty() {
        Ok(None)
    } else {
        Ok(Some(s.parse::<T>()?))
    }
}

pub fn write_rows(path: &Path, k: usize, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(row_header(k))?;
    for r in rows {
        let mut rec = vec![
            r.replicate.to_string(),
            r.horizon.to_string(),
            r.marks.clone(),
            r.estimator.clone(),
            r.status.clone(),
            cell(&r.attempts),
            cell(&r.events),
            cell(&r.final_state),
            cell(&r.converged),
            cell(&r.iterations),
            r.flags.clone(),
        ];
        let pad = |v: &[Option<f64>], n: usize| (0..n).map(|i| cell(&v.get(i).copied().flatten())).collect::<Vec<_>>();
        rec.extend(pad(&r.beta, k));
        rec.push(cell(&r.mu));
        rec.extend(pad(&r.scaled, k));
        rec.extend(pad(&r.se, k + 1));
        rec.extend((0..=k).map(|i| cell(&r.covered.get(i).copied().flatten())));
        rec.extend([cell(&r.z), cell(&r.w), cell(&r.p), cell(&r.rn_full), cell(&r.rn_fixed)]);
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `replicates.csv`; `K` is inferred from the header.
pub fn read_rows(path: &Path) -> Result<(usize, Vec<Row>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let k = header.iter().filter(|h| h.starts_with("beta_")).count();
    if header != row_header(k) {
        bail!("{}: unexpected header", path.display());
    }
    let mut rows = Vec::new();
    for (line, record) in r.records().enumerate() {
        let rec = record?;
        let ctx = || format!("{} row {}", path.display(), line + 1);
        let f = |i: usize| parse::<f64>(&rec[i]).with_context(ctx);
        let mut row = Row {
            replicate: rec[0].parse().with_context(ctx)?,
            horizon: rec[1].parse().with_context(ctx)?,
            marks: rec[2].to_string(),
            estimator: rec[3].to_string(),
            status: rec[4].to_string(),
            attempts: parse(&rec[5]).with_context(ctx)?,
            events: parse(&rec[6]).with_context(ctx)?,
            final_state: parse(&rec[7]).with_context(ctx)?,
            converged: parse(&rec[8]).with_context(ctx)?,
            iterations: parse(&rec[9]).with_context(ctx)?,
            flags: rec[10].to_string(),
            ..Row::default()
        };
        let mut i = 11;
        row.beta = (0..k).map(|j| f(i + j)).collect::<Result<_>>()?;
        i += k;
        row.mu = f(i)?;
        i += 1;
        row.scaled = (0..k).map(|j| f(i + j)).collect::<Result<_>>()?;
        i += k;
        row.se = (0..=k).map(|j| f(i + j)).collect::<Result<_>>()?;
        i += k + 1;
        row.covered = (0..=k).map(|j| parse::<bool>(&rec[i + j]).with_context(ctx)).collect::<Result<_>>()?;
        i += k + 1;
        row.z = f(i)?;
        row.w = f(i + 1)?;
        row.p = f(i + 2)?;
        row.rn_full = f(i + 3)?;
        row.rn_fixed = f(i + 4)?;
        rows.push(row);
    }
    Ok((k, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = vec![
            Row {
                replicate: 3,
                horizon: 200.0,
                marks: "unmarked".into(),
                estimator: "qmle".into(),
                status: "ok".into(),
                attempts: Some(12),
                converged: Some(true),
                beta: vec![Some(0.1 / 3.0), None],
                mu: Some(1.0),
                scaled: vec![Some(1.0 / 3.0), None],
                se: vec![None, Some(0.25), Some(1e-300)],
                covered: vec![Some(true), None, Some(false)],
                z: Some(-0.5),
                ..Row::default()
            },
            Row { replicate: 4, horizon: 1e3, status: "error".into(), ..Row::default() },
        ];
        write_rows(&path, 2, &rows).unwrap();
        let (k, back) = read_rows(&path).unwrap();
        assert_eq!(k, 2);
        let mut expected = rows.clone();
        expected[1].beta = vec![None, None];
        expected[1].scaled = vec![None, None];
        expected[1].se = vec![None; 3];
        expected[1].covered = vec![None; 3];
        assert_eq!(back, expected);
    }
}
