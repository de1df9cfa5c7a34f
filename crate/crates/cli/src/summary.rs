//! Summary statistics, computed only from the replicate table.
//!
//! `summarize` is a pure function of the rows plus the truth and levels recorded
//! in `summary.json`, so `bdp validate` can recompute and compare every number.

use std::collections::BTreeMap;

use anyhow::{bail, Result};
use bdp_core::asymptotics::{normal_cdf, normal_quantile};
use serde::{Deserialize, Serialize};

use crate::config::Experiment;
use crate::io::Row;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coord {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordStats {
    pub name: String,
    pub truth: f64,
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    /// Monte Carlo standard error of the mean.
    pub mcse: Option<f64>,
    pub bias: Option<f64>,
    pub rmse: Option<f64>,
    /// Fraction of nominal 95% intervals covering the truth.
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullStats {
    pub n: usize,
    pub z_mean: Option<f64>,
    pub z_sd: Option<f64>,
    /// Kolmogorov-Smirnov distance of the Z sample to N(0, 1).
    pub ks: Option<f64>,
    /// Kolmogorov-Smirnov distance of the p-values to U(0, 1).
    pub ks_p: Option<f64>,
    pub p_w0: Option<f64>,
    /// Rejection rate at each level.
    pub rejection: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnStats {
    pub n: usize,
    pub full_min: Option<f64>,
    pub full_max: Option<f64>,
    pub full_mean: Option<f64>,
    pub fixed_mean: Option<f64>,
    pub fixed_max_deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub horizon: f64,
    pub marks: String,
    pub estimator: String,
    pub rows: usize,
    pub ok: usize,
    pub flagged: usize,
    pub errors: usize,
    pub attempts_mean: Option<f64>,
    /// Accepted paths over total rejection-sampling attempts.
    pub survival_fraction: Option<f64>,
    pub events_mean: Option<f64>,
    pub coords: Vec<CoordStats>,
    pub null: Option<NullStats>,
    pub rn: Option<RnStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: Experiment,
    pub base_seed: u64,
    pub replicates: u64,
    /// Truth in reporting coordinates (`b_i` for SIS, then `mu`).
    pub truth: Vec<Coord>,
    pub levels: Vec<f64>,
    /// Provenance of the information matrix behind standard errors and tests.
    pub information: String,
    pub groups: Vec<Group>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn sd(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    (xs.len() >= 2).then(|| (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt())
}

fn ks(xs: &[f64], cdf: impl Fn(f64) -> f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    Some(
        v.iter()
            .enumerate()
            .map(|(i, x)| {
                let f = cdf(*x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max),
    )
}

fn level_key(alpha: f64) -> String {
    format!("{alpha}")
}

fn coord_stats(name: &str, truth: f64, values: &[f64], covered: &[bool]) -> CoordStats {
    let m = mean(values);
    let s = sd(values);
    CoordStats {
        name: name.to_string(),
        truth,
        n: values.len(),
        mean: m,
        sd: s,
        mcse: s.map(|s| s / (values.len() as f64).sqrt()),
        bias: m.map(|m| m - truth),
        rmse: (!values.is_empty()).then(|| (values.iter().map(|x| (x - truth).powi(2)).sum::<f64>() / values.len() as f64).sqrt()),
        coverage: (!covered.is_empty()).then(|| covered.iter().filter(|c| **c).count() as f64 / covered.len() as f64),
    }
}

fn group(rows: &[&Row], truth: &[Coord], levels: &[f64]) -> Group {
    let first = rows[0];
    let live: Vec<&Row> = rows.iter().copied().filter(|r| r.status != "error").collect();
    let k = truth.len() - 1;
    let coords = truth
        .iter()
        .enumerate()
        .map(|(a, c)| {
            let pick = |r: &Row| if a < k { r.scaled.get(a).copied().flatten() } else { r.mu };
            let values: Vec<f64> = live.iter().filter_map(|r| pick(r)).collect();
            let covered: Vec<bool> = live.iter().filter_map(|r| r.covered.get(a).copied().flatten()).collect();
            coord_stats(&c.name, c.value, &values, &covered)
        })
        .filter(|c| c.n > 0)
        .collect();
    let attempts: Vec<f64> = live.iter().filter_map(|r| r.attempts.map(|a| a as f64)).collect();
    let events: Vec<f64> = live.iter().filter_map(|r| r.events.map(|e| e as f64)).collect();
    let z: Vec<f64> = live.iter().filter_map(|r| r.z).collect();
    let null = (!z.is_empty()).then(|| {
        let w: Vec<f64> = live.iter().filter_map(|r| r.w).collect();
        let p: Vec<f64> = live.iter().filter_map(|r| r.p).collect();
        let rejection = levels
            .iter()
            .map(|&alpha| {
                let crit = normal_quantile(1.0 - alpha);
                (level_key(alpha), z.iter().filter(|z| **z > crit).count() as f64 / z.len() as f64)
            })
            .collect();
        NullStats {
            n: z.len(),
            z_mean: mean(&z),
            z_sd: sd(&z),
            ks: ks(&z, normal_cdf),
            ks_p: ks(&p, |x| x.clamp(0.0, 1.0)),
            p_w0: (!w.is_empty()).then(|| w.iter().filter(|w| **w == 0.0).count() as f64 / w.len() as f64),
            rejection,
        }
    });
    let full: Vec<f64> = live.iter().filter_map(|r| r.rn_full).collect();
    let fixed: Vec<f64> = live.iter().filter_map(|r| r.rn_fixed).collect();
    let rn = (!full.is_empty() || !fixed.is_empty()).then(|| RnStats {
        n: full.len().max(fixed.len()),
        full_min: full.iter().copied().reduce(f64::min),
        full_max: full.iter().copied().reduce(f64::max),
        full_mean: mean(&full),
        fixed_mean: mean(&fixed),
        fixed_max_deviation: fixed.iter().map(|v| (v - 1.0).abs()).reduce(f64::max),
    });
    let total_attempts: f64 = attempts.iter().sum();
    Group {
        horizon: first.horizon,
        marks: first.marks.clone(),
        estimator: first.estimator.clone(),
        rows: rows.len(),
        ok: rows.iter().filter(|r| r.status == "ok").count(),
        flagged: rows.iter().filter(|r| r.status == "flagged").count(),
        errors: rows.len() - live.len(),
        attempts_mean: mean(&attempts),
        survival_fraction: (total_attempts > 0.0).then(|| attempts.len() as f64 / total_attempts),
        events_mean: mean(&events),
        coords,
        null,
        rn,
    }
}

/// Groups rows by `(horizon, marks, estimator)` in order of first appearance.
pub fn groups(rows: &[Row], truth: &[Coord], levels: &[f64]) -> Vec<Group> {
    let mut keys: Vec<(f64, &str, &str)> = Vec::new();
    for r in rows {
        let key = (r.horizon, r.marks.as_str(), r.estimator.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.iter()
        .map(|key| {
            let members: Vec<&Row> = rows.iter().filter(|r| (r.horizon, r.marks.as_str(), r.estimator.as_str()) == *key).collect();
            group(&members, truth, levels)
        })
        .collect()
}

/// Recomputes `summary` from `rows` and reports the first disagreement.
pub fn validate(summary: &Summary, rows: &[Row]) -> Result<usize> {
    let recomputed = groups(rows, &summary.truth, &summary.levels);
    let a = serde_json::to_value(&summary.groups)?;
    let b = serde_json::to_value(&recomputed)?;
    let mut checked = 0;
    compare(&a, &b, "groups", &mut checked)?;
    Ok(checked)
}

fn compare(a: &serde_json::Value, b: &serde_json::Value, path: &str, checked: &mut usize) -> Result<()> {
    use serde_json::Value;
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap_or(f64::NAN), y.as_f64().unwrap_or(f64::NAN));
            *checked += 1;
            if (x - y).abs() > 1e-12 * x.abs().max(y.abs()).max(1e-300) {
                bail!("{path}: summary has {x}, replicate table gives {y}");
            }
        }
        (Value::Array(x), Value::Array(y)) => {
            if x.len() != y.len() {
                bail!("{path}: length {} vs {}", x.len(), y.len());
            }
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                compare(u, v, &format!("{path}[{i}]"), checked)?;
            }
        }
        (Value::Object(x), Value::Object(y)) => {
            if x.len() != y.len() || x.keys().any(|k| !y.contains_key(k)) {
                bail!("{path}: field sets differ");
            }
            for (k, u) in x {
                compare(u, &y[k], &format!("{path}.{k}"), checked)?;
            }
        }
        _ => {
            *checked += 1;
            if a != b {
                bail!("{path}: summary has {a}, replicate table gives {b}");
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(rep: u64, b: f64, z: f64) -> Row {
        Row {
            replicate: rep,
            horizon: 10.0,
            marks: "unmarked".into(),
            estimator: "conditional-mle".into(),
            status: "ok".into(),
            scaled: vec![Some(b)],
            mu: Some(1.0),
            covered: vec![Some(rep % 2 == 0), None],
            z: Some(z),
            w: Some(z.max(0.0).powi(2)),
            p: Some(1.0 - normal_cdf(z)),
            ..Row::default()
        }
    }

    fn truth() -> Vec<Coord> {
        vec![Coord { name: "b_1".into(), value: 1.0 }, Coord { name: "mu".into(), value: 1.0 }]
    }

    #[test]
    fn statistics_by_hand() {
        let rows = vec![row(0, 1.0, -1.0), row(1, 2.0, 0.5), row(2, 3.0, 2.0)];
        let g = &groups(&rows, &truth(), &[0.05])[0];
        let b = &g.coords[0];
        assert_eq!(b.mean, Some(2.0));
        assert_eq!(b.sd, Some(1.0));
        assert_eq!(b.bias, Some(1.0));
        assert!((b.rmse.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((b.coverage.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let null = g.null.as_ref().unwrap();
        assert!((null.p_w0.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((null.rejection["0.05"] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn validation_detects_tampering() {
        let rows = vec![row(0, 1.0, -1.0), row(1, 2.0, 0.5)];
        let mut summary = Summary {
            experiment: Experiment::Consistency,
            base_seed: 0,
            replicates: 2,
            truth: truth(),
            levels: vec![0.05],
            information: "observed".into(),
            groups: groups(&rows, &truth(), &[0.05]),
        };
        assert!(validate(&summary, &rows).unwrap() > 10);
        summary.groups[0].coords[0].mean = Some(1.6);
        assert!(validate(&summary, &rows).is_err());
    }
}
