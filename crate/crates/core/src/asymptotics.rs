//! Information matrices, the one-sided Wald test, limit functions and
//! Radon-Nikodym diagnostics.
//!
//! Matrices are indexed by `(beta_1, ..., beta_K, mu)`. `H` is stored with
//! rows indexed by full-score weights and columns by working-score weights,
//! so the Jacobian of the limiting estimating function is `-H^T`. The QMLE
//! covariance follows from linearizing the working score around the root:
//! `sqrt(T) (theta_bar - theta_0) ~ N(0, H^-T J H^-1)`, and the Godambe matrix
//! is its inverse, `H J^-1 H^T`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{BdpError, Result};
use crate::inference::{full_weights, working_weights, FitResult, ScoreWeights, SufficientStats};
use crate::model::{ParamSpace, ParamVector, StructuralFunctions};
use crate::simulate::Trajectory;
use crate::spectral::{survival_vector, SpectralSnapshot};

/// Condition number (after diagonal scaling) above which a matrix is treated as singular.
pub const MAX_CONDITION: f64 = 1e10;

/// Default Wald test levels.
pub const DEFAULT_LEVELS: [f64; 3] = [0.10, 0.05, 0.01];

#[derive(Debug, Clone, PartialEq)]
pub struct InfoMatrices {
    pub fisher: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub godambe: DMatrix<f64>,
}

impl InfoMatrices {
    /// Asymptotic covariance of the QMLE, `H^-T J H^-1`.
    pub fn sandwich(&self) -> Result<DMatrix<f64>> {
        let hinv = self
            .h
            .clone()
            .try_inverse()
            .ok_or_else(|| BdpError::Identifiability("H is singular".into()))?;
        Ok(hinv.transpose() * &self.j * hinv)
    }
}

/// Row-major copy, for JSON output.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Inverse of a symmetric positive-definite matrix with its conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct PdInverse {
    pub inverse: DMatrix<f64>,
    /// Condition number of the unit-diagonal rescaling.
    pub condition: f64,
    pub min_eigenvalue: f64,
}

/// Inverts `m` through its unit-diagonal rescaling `D^-1/2 m D^-1/2`.
///
/// Scaling first makes the condition number independent of parameter units
/// (birth coefficients are often orders of magnitude smaller than `mu`).
pub fn pd_inverse(m: &DMatrix<f64>) -> Result<PdInverse> {
    let d = m.nrows();
    if d != m.ncols() || d == 0 {
        return Err(BdpError::Argument("matrix must be square and nonempty".into()));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(BdpError::Identifiability("matrix has non-finite entries".into()));
    }
    let diag: Vec<f64> = (0..d).map(|i| m[(i, i)]).collect();
    if diag.iter().any(|x| !(*x > 0.0)) {
        return Err(BdpError::Identifiability("matrix has a nonpositive diagonal entry".into()));
    }
    let s: Vec<f64> = diag.iter().map(|x| 1.0 / x.sqrt()).collect();
    let scaled = DMatrix::from_fn(d, d, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]) * s[i] * s[j]);
    let eig = SymmetricEigen::new(scaled.clone());
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_eigenvalue = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(lo > 0.0) {
        return Err(BdpError::Identifiability(format!("matrix is not positive definite (scaled eigenvalue {lo:e})")));
    }
    let condition = hi / lo;
    if condition > MAX_CONDITION {
        return Err(BdpError::Identifiability(format!("condition number {condition:e} exceeds {MAX_CONDITION:e}")));
    }
    let chol = scaled
        .cholesky()
        .ok_or_else(|| BdpError::Identifiability("Cholesky factorization failed".into()))?;
    let inv_scaled = chol.inverse();
    let inverse = DMatrix::from_fn(d, d, |i, j| inv_scaled[(i, j)] * s[i] * s[j]);
    Ok(PdInverse { inverse, condition, min_eigenvalue })
}

fn weighted_outer(
    w_row: &ScoreWeights,
    w_col: &ScoreWeights,
    plus_mass: &[f64],
    minus_mass: &[f64],
) -> DMatrix<f64> {
    let d = w_row.plus.len();
    let n = plus_mass.len() - 1;
    DMatrix::from_fn(d, d, |a, b| {
        let mut s = 0.0;
        for k in 1..n {
            s += plus_mass[k] * w_row.plus[a][k] * w_col.plus[b][k];
        }
        for k in 2..=n {
            s += minus_mass[k] * w_row.minus[a][k] * w_col.minus[b][k];
        }
        s
    })
}

fn population_masses(snap: &SpectralSnapshot) -> (Vec<f64>, Vec<f64>) {
    let pi = &snap.spectral.pi_tilde;
    let q = &snap.tilted;
    let plus = pi.iter().zip(&q.lambda_tilde).map(|(p, l)| p * l).collect();
    let minus = pi.iter().zip(&q.mu_tilde).map(|(p, m)| p * m).collect();
    (plus, minus)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (&m + m.transpose())
}

/// Fisher information of the conditional likelihood per unit time (unmarked births).
pub fn fisher_information(spec: &StructuralFunctions, theta: &ParamVector) -> Result<DMatrix<f64>> {
    let snap = SpectralSnapshot::new(spec, theta, true)?;
    fisher_information_with(spec, theta, &snap)
}

pub fn fisher_information_with(spec: &StructuralFunctions, theta: &ParamVector, snap: &SpectralSnapshot) -> Result<DMatrix<f64>> {
    let w = full_weights(spec, theta, snap)?;
    let (plus, minus) = population_masses(snap);
    Ok(symmetrize(weighted_outer(&w, &w, &plus, &minus)))
}

/// Per-mechanism birth weights `d log(beta_i f_i R+)/d theta_a`, indexed `[i][a][k]`.
fn marked_birth_weights(spec: &StructuralFunctions, theta: &ParamVector, snap: &SpectralSnapshot) -> Vec<Vec<Vec<f64>>> {
    let sens = snap.sensitivities();
    let n = spec.capacity();
    let kmech = spec.mechanisms();
    (0..kmech)
        .map(|i| {
            (0..=kmech)
                .map(|a| {
                    (0..=n)
                        .map(|k| {
                            if k == 0 || k >= n {
                                return 0.0;
                            }
                            let own = if a == i { 1.0 / theta.beta[i] } else { 0.0 };
                            own + sens.dlog_r_plus[a][k]
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn marked_information(
    spec: &StructuralFunctions,
    theta: &ParamVector,
    snap: &SpectralSnapshot,
    occupation: &[f64],
) -> Result<DMatrix<f64>> {
    let w = full_weights(spec, theta, snap)?;
    let n = spec.capacity();
    let d = spec.dim();
    let q = &snap.tilted;
    let minus: Vec<f64> = occupation.iter().zip(&q.mu_tilde).map(|(t, m)| t * m).collect();
    let zeros = vec![0.0; n + 1];
    let mut info = weighted_outer(&w, &w, &zeros, &minus);
    let mw = marked_birth_weights(spec, theta, snap);
    for (i, wi) in mw.iter().enumerate() {
        for k in 1..n {
            let mass = occupation[k] * theta.beta[i] * spec.f(i, k) * q.r_plus[k];
            if mass == 0.0 {
                continue;
            }
            for a in 0..d {
                for b in 0..d {
                    info[(a, b)] += mass * wi[a][k] * wi[b][k];
                }
            }
        }
    }
    Ok(symmetrize(info))
}

/// Fisher information when the birth mechanism of every birth is observed.
pub fn fisher_information_marked(spec: &StructuralFunctions, theta: &ParamVector) -> Result<DMatrix<f64>> {
    let snap = SpectralSnapshot::new(spec, theta, true)?;
    marked_information(spec, theta, &snap, &snap.spectral.pi_tilde)
}

/// Plug-in information `T^-1 [sum g+ g+^T lambda~_k T_k + sum g- g-^T mu~_k T_k]`.
///
/// Uses the mechanism-resolved form when `stats` carries marks.
pub fn fisher_information_observed(
    stats: &SufficientStats,
    spec: &StructuralFunctions,
    theta: &ParamVector,
) -> Result<DMatrix<f64>> {
    stats.validate(spec)?;
    let snap = SpectralSnapshot::new(spec, theta, true)?;
    let t = stats.horizon;
    let info = if stats.is_marked() {
        marked_information(spec, theta, &snap, &stats.occupation)?
    } else {
        let w = full_weights(spec, theta, &snap)?;
        let q = &snap.tilted;
        let plus: Vec<f64> = stats.occupation.iter().zip(&q.lambda_tilde).map(|(o, l)| o * l).collect();
        let minus: Vec<f64> = stats.occupation.iter().zip(&q.mu_tilde).map(|(o, m)| o * m).collect();
        symmetrize(weighted_outer(&w, &w, &plus, &minus))
    };
    Ok(info / t)
}

/// `I`, `J`, `H` and the Godambe matrix `G = H J^-1 H^T` at `theta`.
pub fn godambe(spec: &StructuralFunctions, theta: &ParamVector) -> Result<InfoMatrices> {
    let snap = SpectralSnapshot::new(spec, theta, true)?;
    godambe_with(spec, theta, &snap)
}

pub fn godambe_with(spec: &StructuralFunctions, theta: &ParamVector, snap: &SpectralSnapshot) -> Result<InfoMatrices> {
    let full = full_weights(spec, theta, snap)?;
    let work = working_weights(spec, theta);
    let (plus, minus) = population_masses(snap);
    let fisher = symmetrize(weighted_outer(&full, &full, &plus, &minus));
    let j = symmetrize(weighted_outer(&work, &work, &plus, &minus));
    let h = weighted_outer(&full, &work, &plus, &minus);
    let jinv = pd_inverse(&j)?.inverse;
    let hs = h.clone().svd(false, false).singular_values;
    let (smax, smin) = (hs.max(), hs.min());
    if !(smin > smax / MAX_CONDITION * 1e-2) {
        return Err(BdpError::Identifiability(format!("H is numerically singular (singular values {smin:e}..{smax:e})")));
    }
    let godambe = symmetrize(&h * jinv * h.transpose());
    Ok(InfoMatrices { fisher, j, h, godambe })
}

pub fn normal_cdf(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Critical value of the projected statistic `W` under the `1/2 chi2_0 + 1/2 chi2_1` null.
pub fn mixture_critical_value(alpha: f64) -> f64 {
    normal_quantile(1.0 - alpha).powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldResult {
    /// Tested mechanism (zero-based).
    pub i: usize,
    pub z: f64,
    pub w: f64,
    pub se: f64,
    pub p_one_sided: f64,
    /// Level (formatted) to rejection decision.
    pub reject_at: BTreeMap<String, bool>,
    /// Set when the fit reported the admissibility boundary.
    pub boundary: bool,
}

/// One-sided Wald test of `beta_i = 0` against `beta_i > 0` at the default levels.
pub fn wald_test(fit: &FitResult, i_hat: &DMatrix<f64>, horizon: f64, i: usize) -> Result<WaldResult> {
    wald_test_levels(fit, i_hat, horizon, i, &DEFAULT_LEVELS)
}

pub fn wald_test_levels(
    fit: &FitResult,
    i_hat: &DMatrix<f64>,
    horizon: f64,
    i: usize,
    levels: &[f64],
) -> Result<WaldResult> {
    if fit.theta_hat.space != ParamSpace::Test(i) {
        return Err(BdpError::Argument(format!("fit is not on the test space for mechanism {i}")));
    }
    if !(horizon > 0.0) {
        return Err(BdpError::Argument("horizon must be positive".into()));
    }
    let inv = pd_inverse(i_hat)?.inverse;
    let se = (inv[(i, i)] / horizon).sqrt();
    let z = fit.theta_hat.beta[i] / se;
    let p_one_sided = 1.0 - normal_cdf(z);
    let reject_at = levels
        .iter()
        .map(|&alpha| (format!("{alpha}"), z > normal_quantile(1.0 - alpha)))
        .collect();
    Ok(WaldResult {
        i,
        z,
        w: z.max(0.0).powi(2),
        se,
        p_one_sided,
        reject_at,
        boundary: fit.has_flag(crate::inference::FitFlag::Boundary),
    })
}

/// Deterministic limit of `T^-1` times the conditional log-likelihood at `theta`
/// when the data follow the Q-process at `theta0`.
pub fn limit_contrast(spec: &StructuralFunctions, theta: &ParamVector, theta0: &ParamVector) -> Result<f64> {
    let s0 = SpectralSnapshot::new(spec, theta0, false)?;
    let s = SpectralSnapshot::new(spec, theta, false)?;
    let n = spec.capacity();
    let (pi0, q0, q) = (&s0.spectral.pi_tilde, &s0.tilted, &s.tilted);
    let mut value = 0.0;
    for k in 1..=n {
        if k < n {
            value += pi0[k] * q0.lambda_tilde[k] * q.lambda_tilde[k].ln();
        }
        if k >= 2 {
            value += pi0[k] * q0.mu_tilde[k] * q.mu_tilde[k].ln();
        }
        value -= pi0[k] * (q.lambda_tilde[k] + q.mu_tilde[k]);
    }
    Ok(value)
}

/// Limit of `T^-1` times the working score at `theta` under the Q-process at `theta0`.
pub fn limit_estimating(spec: &StructuralFunctions, theta: &ParamVector, theta0: &ParamVector) -> Result<Vec<f64>> {
    let s0 = SpectralSnapshot::new(spec, theta0, false)?;
    let s = SpectralSnapshot::new(spec, theta, false)?;
    let w = working_weights(spec, theta);
    let n = spec.capacity();
    let (pi0, q0, q) = (&s0.spectral.pi_tilde, &s0.tilted, &s.tilted);
    Ok((0..spec.dim())
        .map(|a| {
            let mut v = 0.0;
            for k in 1..n {
                v += pi0[k] * w.plus[a][k] * (q0.lambda_tilde[k] - q.lambda_tilde[k]);
            }
            for k in 2..=n {
                v += pi0[k] * w.minus[a][k] * (q0.mu_tilde[k] - q.mu_tilde[k]);
            }
            v
        })
        .collect())
}

/// Value of a Radon-Nikodym diagnostic; `absorbed` paths have value 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RnValue {
    pub value: f64,
    pub absorbed: bool,
}

/// Density of the survival-conditioned law against the Q-process law on `[0, t]`,
/// for conditioning on survival to `horizon`.
pub fn rn_derivative(
    spec: &StructuralFunctions,
    theta: &ParamVector,
    traj: &Trajectory,
    t: f64,
    horizon: f64,
) -> Result<RnValue> {
    if !(0.0..=horizon).contains(&t) || t > traj.horizon {
        return Err(BdpError::Argument(format!("need 0 <= t <= T within the observed window, got t={t}, T={horizon}")));
    }
    let xt = traj.state_at(t)?;
    if xt == 0 {
        return Ok(RnValue { value: 0.0, absorbed: true });
    }
    let snap = SpectralSnapshot::new(spec, theta, false)?;
    let i = traj.x0;
    let late = survival_vector(&snap.generator, horizon - t)?[xt];
    let early = survival_vector(&snap.generator, horizon)?[i];
    let h = &snap.spectral.h;
    let log_value = h[i].ln() - h[xt].ln() + late.ln() - early.ln() + snap.spectral.gamma * t;
    Ok(RnValue { value: log_value.exp(), absorbed: false })
}

/// Density of the survival-conditioned law against the Q-process law on the full window `[0, T]`.
pub fn rn_full_window(spec: &StructuralFunctions, theta: &ParamVector, traj: &Trajectory, horizon: f64) -> Result<RnValue> {
    if !(horizon > 0.0) || horizon > traj.horizon {
        return Err(BdpError::Argument(format!("horizon {horizon} outside the observed window")));
    }
    let xt = traj.state_at(horizon)?;
    if xt == 0 {
        return Ok(RnValue { value: 0.0, absorbed: true });
    }
    let snap = SpectralSnapshot::new(spec, theta, false)?;
    let i = traj.x0;
    let survival = survival_vector(&snap.generator, horizon)?[i];
    let h = &snap.spectral.h;
    let log_value = h[i].ln() - h[xt].ln() + snap.spectral.gamma * horizon - survival.ln();
    Ok(RnValue { value: log_value.exp(), absorbed: false })
}

/// Large-`T` range of the full-window density: `[min_k, max_k] 1/(c_theta h(k))`.
pub fn rn_limit_band(spec: &StructuralFunctions, theta: &ParamVector) -> Result<(f64, f64)> {
    let snap = SpectralSnapshot::new(spec, theta, false)?;
    let s = &snap.spectral;
    let values = (1..=spec.capacity()).map(|k| 1.0 / (s.c_theta * s.h[k]));
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi))
}
