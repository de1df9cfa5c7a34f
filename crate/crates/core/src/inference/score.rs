//! Full and working scores in counts-minus-compensator form.
//!
//! Every score here is `sum_k g+(k) [N+_k - lambda~_k T_k] + sum_{k>=2} g-(k) [N-_k - mu~_k T_k]`
//! for a pair of weight tables `g+`, `g-`. The full score uses the derivatives
//! of `log lambda~_k` and `log mu~_k`; the working score drops the tilt-factor
//! derivatives and keeps only those of the original rates.

use serde::{Deserialize, Serialize};

use crate::error::{BdpError, Result};
use crate::model::{ParamVector, StructuralFunctions};
use crate::spectral::{QProcessRates, SpectralSnapshot};

use super::likelihood::{check_conditional_data, check_dims};
use super::stats::SufficientStats;

/// Score components with respect to `(beta_1, ..., beta_K, mu)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub components: Vec<f64>,
}

impl ScoreVector {
    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn norm(&self) -> f64 {
        self.components.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.components.iter().all(|x| x.is_finite())
    }
}

/// Per-state score weights, indexed `[coordinate][state]`.
///
/// `plus[a][k]` is used for `k = 1..N-1`, `minus[a][k]` for `k = 2..N`;
/// all other entries are zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreWeights {
    pub plus: Vec<Vec<f64>>,
    pub minus: Vec<Vec<f64>>,
}

/// Weights of the working score: `f_a(k)/lambda_k` for births, `1/mu` for deaths.
pub fn working_weights(spec: &StructuralFunctions, theta: &ParamVector) -> ScoreWeights {
    let n = spec.capacity();
    let kmech = spec.mechanisms();
    let mut plus = vec![vec![0.0; n + 1]; kmech + 1];
    let mut minus = vec![vec![0.0; n + 1]; kmech + 1];
    for k in 1..n {
        let lambda = spec.lambda(&theta.beta, k);
        for (a, row) in plus.iter_mut().take(kmech).enumerate() {
            row[k] = spec.f(a, k) / lambda;
        }
    }
    for k in 2..=n {
        minus[kmech][k] = 1.0 / theta.mu;
    }
    ScoreWeights { plus, minus }
}

/// Weights of the full score: working weights plus tilt-factor log-derivatives.
pub fn full_weights(spec: &StructuralFunctions, theta: &ParamVector, snap: &SpectralSnapshot) -> Result<ScoreWeights> {
    let sens = snap
        .sensitivities
        .as_ref()
        .ok_or_else(|| BdpError::Argument("full score needs spectral sensitivities".into()))?;
    let n = spec.capacity();
    let mut w = working_weights(spec, theta);
    for a in 0..spec.dim() {
        for k in 1..n {
            w.plus[a][k] += sens.dlog_r_plus[a][k];
        }
        for k in 2..=n {
            w.minus[a][k] += sens.dlog_r_minus[a][k];
        }
    }
    Ok(w)
}

fn contract(w: &ScoreWeights, stats: &SufficientStats, q: &QProcessRates) -> Vec<f64> {
    let n = stats.capacity();
    w.plus
        .iter()
        .zip(&w.minus)
        .map(|(gp, gm)| {
            let mut u = 0.0;
            for k in 1..n {
                u += gp[k] * (stats.births[k] as f64 - q.lambda_tilde[k] * stats.occupation[k]);
            }
            for k in 2..=n {
                u += gm[k] * (stats.deaths[k] as f64 - q.mu_tilde[k] * stats.occupation[k]);
            }
            u
        })
        .collect()
}

/// Replaces the pooled birth term `sum_k f_a/lambda [N+_k - lambda~_k T_k]` of
/// each beta component with its mechanism-resolved form
/// `sum_k [N_{a,k}/beta_a - f_a(k) R+(k) T_k]`.
fn apply_marks(u: &mut [f64], stats: &SufficientStats, spec: &StructuralFunctions, theta: &ParamVector, q: &QProcessRates) {
    let Some(table) = &stats.births_by_mech else { return };
    let n = spec.capacity();
    for (a, row) in table.iter().enumerate() {
        let beta = theta.beta[a];
        let mut pooled = 0.0;
        let mut marked = 0.0;
        for k in 1..n {
            let f = spec.f(a, k);
            if f == 0.0 {
                continue;
            }
            let lambda = spec.lambda(&theta.beta, k);
            pooled += f / lambda * (stats.births[k] as f64 - q.lambda_tilde[k] * stats.occupation[k]);
            marked -= f * q.r_plus[k] * stats.occupation[k];
        }
        let count: u64 = row.iter().sum();
        if count > 0 {
            marked += count as f64 / beta;
        }
        u[a] += marked - pooled;
    }
}

fn prepare(stats: &SufficientStats, spec: &StructuralFunctions, theta: &ParamVector) -> Result<()> {
    check_dims(stats, spec, theta)?;
    check_conditional_data(stats)
}

/// Gradient of the conditional log-likelihood.
pub fn full_score(stats: &SufficientStats, spec: &StructuralFunctions, theta: &ParamVector) -> Result<ScoreVector> {
    prepare(stats, spec, theta)?;
    let snap = SpectralSnapshot::new(spec, theta, true)?;
    full_score_with(stats, spec, theta, &snap)
}

/// [`full_score`] against a snapshot built with sensitivities.
pub fn full_score_with(
    stats: &SufficientStats,
    spec: &StructuralFunctions,
    theta: &ParamVector,
    snap: &SpectralSnapshot,
) -> Result<ScoreVector> {
    let w = full_weights(spec, theta, snap)?;
    let mut u = contract(&w, stats, &snap.tilted);
    apply_marks(&mut u, stats, spec, theta, &snap.tilted);
    Ok(ScoreVector { components: u })
}

/// Estimating function that omits derivatives of the tilt factors.
pub fn working_score(stats: &SufficientStats, spec: &StructuralFunctions, theta: &ParamVector) -> Result<ScoreVector> {
    prepare(stats, spec, theta)?;
    let snap = SpectralSnapshot::new(spec, theta, false)?;
    working_score_with(stats, spec, theta, &snap)
}

/// [`working_score`] against precomputed spectral data.
pub fn working_score_with(
    stats: &SufficientStats,
    spec: &StructuralFunctions,
    theta: &ParamVector,
    snap: &SpectralSnapshot,
) -> Result<ScoreVector> {
    let w = working_weights(spec, theta);
    let mut u = contract(&w, stats, &snap.tilted);
    apply_marks(&mut u, stats, spec, theta, &snap.tilted);
    Ok(ScoreVector { components: u })
}

/// Gradient of the unconditional log-likelihood (original rates, no tilt).
pub fn unconditional_score(stats: &SufficientStats, spec: &StructuralFunctions, theta: &ParamVector) -> Result<ScoreVector> {
    check_dims(stats, spec, theta)?;
    let n = spec.capacity();
    let kmech = spec.mechanisms();
    let mut u = vec![0.0; kmech + 1];
    for k in 1..n {
        let lambda = spec.lambda(&theta.beta, k);
        for (a, ua) in u.iter_mut().take(kmech).enumerate() {
            let f = spec.f(a, k);
            *ua -= f * stats.occupation[k];
            if stats.births_by_mech.is_none() && stats.births[k] > 0 {
                *ua += f / lambda * stats.births[k] as f64;
            }
        }
    }
    if let Some(table) = &stats.births_by_mech {
        for (a, row) in table.iter().enumerate() {
            let count: u64 = row.iter().sum();
            if count > 0 {
                u[a] += count as f64 / theta.beta[a];
            }
        }
    }
    u[kmech] = stats.total_deaths() as f64 / theta.mu - stats.death_exposure(spec);
    Ok(ScoreVector { components: u })
}
