//! The naive, conditional and quasi-likelihood estimators.
//!
//! Free coordinates are optimized in log scale on the estimation space. On a
//! test space the tested `beta_i` stays in natural scale (divided by a data
//! scale so all working coordinates are O(1)); an undefined score at a trial
//! point (some birth rate not positive) acts as a barrier in the line search.
//!
//! Root-finding tolerances are applied to the score with respect to the
//! working coordinates, i.e. `theta_a U_a` for log coordinates. That quantity
//! has the units of a log-likelihood, so `1e-6 (1 + T)` is meaningful
//! whatever the magnitude of `theta`.

use serde::{Deserialize, Serialize};

use crate::error::{BdpError, Result};
use crate::model::{validate_admissible, ParamSpace, ParamVector, StructuralFunctions};
use crate::spectral::SpectralSnapshot;

use super::likelihood::{check_conditional_data, check_dims, loglik_conditional_with, loglik_unconditional};
use super::optim::{bfgs, newton_root, Outcome, TraceEntry};
use super::score::{full_score_with, unconditional_score, working_score_with};
use super::stats::SufficientStats;

const FD_STEP: f64 = 1e-5;
/// Relative distance between multistart roots that counts as disagreement.
const MULTISTART_AGREEMENT: f64 = 1e-4;
/// Estimates below this fraction of their seed are reported on the boundary.
const BOUNDARY_RATIO: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Naive,
    MarkedClosedForm,
    ConditionalMle,
    Qmle,
}

impl EstimatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Naive => "naive",
            EstimatorKind::MarkedClosedForm => "marked-closed-form",
            EstimatorKind::ConditionalMle => "conditional-mle",
            EstimatorKind::Qmle => "qmle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFlag {
    /// Estimate on (or driven to) the boundary of the parameter space.
    Boundary,
    /// A coordinate has no exposure in the data and was held at its seed.
    FlatDirection,
    /// Additional starts converged to a different root.
    MultistartDisagreement,
    /// The primary iteration failed and the fallback method produced the root.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub kind: EstimatorKind,
    pub theta_hat: ParamVector,
    pub converged: bool,
    pub iterations: usize,
    /// Final score (or gradient) norm in working coordinates.
    pub score_norm: f64,
    pub tolerance: f64,
    /// Objective at the estimate, where the estimator has one.
    pub loglik: Option<f64>,
    pub flags: Vec<FitFlag>,
    pub trace: Vec<TraceEntry>,
}

impl FitResult {
    pub fn has_flag(&self, flag: FitFlag) -> bool {
        self.flags.contains(&flag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub space: ParamSpace,
    pub max_iter: usize,
    /// Extra perturbed starts used only to detect multiple roots.
    pub multistart: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { space: ParamSpace::Estimation, max_iter: 100, multistart: 0 }
    }
}

impl FitOptions {
    pub fn test(i: usize) -> Self {
        Self { space: ParamSpace::Test(i), ..Self::default() }
    }
}

/// Maps working coordinates `z` (free coordinates only) to `theta`.
#[derive(Debug, Clone)]
struct Coords {
    space: ParamSpace,
    base: ParamVector,
    free: Vec<usize>,
    scale: Vec<f64>,
}

impl Coords {
    fn new(space: ParamSpace, init: &ParamVector, free: Vec<usize>, scale: Vec<f64>) -> Self {
        Self { space, base: init.clone().with_space(space), free, scale }
    }

    fn is_natural(&self, a: usize) -> bool {
        self.space == ParamSpace::Test(a)
    }

    fn to_theta(&self, z: &[f64]) -> ParamVector {
        let mut theta = self.base.clone();
        for (j, &a) in self.free.iter().enumerate() {
            let v = if self.is_natural(a) { z[j] * self.scale[a] } else { z[j].exp() };
            theta.set(a, v);
        }
        theta
    }

    fn to_z(&self, theta: &ParamVector) -> Vec<f64> {
        self.free
            .iter()
            .map(|&a| if self.is_natural(a) { theta.get(a) / self.scale[a] } else { theta.get(a).ln() })
            .collect()
    }

    /// `U_z` from `U_theta` (chain rule, free coordinates only).
    fn pull_back(&self, theta: &ParamVector, u: &[f64]) -> Vec<f64> {
        self.free
            .iter()
            .map(|&a| if self.is_natural(a) { u[a] * self.scale[a] } else { u[a] * theta.get(a) })
            .collect()
    }
}

/// Method-of-moments seed: every mechanism explains an equal share of births.
pub fn moment_init(stats: &SufficientStats, spec: &StructuralFunctions) -> Result<ParamVector> {
    let kmech = spec.mechanisms();
    let births = stats.total_births() as f64;
    let mut beta = Vec::with_capacity(kmech);
    let pooled: f64 = (0..kmech).map(|i| stats.birth_exposure(spec, i)).sum();
    for i in 0..kmech {
        let exposure = stats.birth_exposure(spec, i);
        let b = if exposure > 0.0 {
            births.max(1.0) / (kmech as f64 * exposure)
        } else if pooled > 0.0 {
            births.max(1.0) / pooled
        } else {
            return Err(BdpError::InsufficientExposure("every birth mechanism (no birth exposure at all)".into()));
        };
        beta.push(b);
    }
    let dexp = stats.death_exposure(spec);
    if !(dexp > 0.0) {
        return Err(BdpError::InsufficientExposure("the death rate (zero death exposure)".into()));
    }
    let mu = (stats.total_deaths() as f64).max(1.0) / dexp;
    Ok(ParamVector::new(beta, mu))
}

/// Default seed: the marked closed form when marks exist (zero estimates
/// lifted to a small positive value), otherwise [`moment_init`].
pub fn default_init(stats: &SufficientStats, spec: &StructuralFunctions) -> Result<ParamVector> {
    let seed = moment_init(stats, spec)?;
    if stats.is_marked() {
        if let Ok(fit) = mle_marked_closed_form(stats, spec) {
            let mut theta = fit.theta_hat;
            for (b, s) in theta.beta.iter_mut().zip(&seed.beta) {
                if !(*b > 0.0) {
                    *b = 1e-3 * s;
                }
            }
            if theta.mu > 0.0 {
                return Ok(theta);
            }
        }
    }
    Ok(seed)
}

fn flat_coordinates(stats: &SufficientStats, spec: &StructuralFunctions) -> Vec<usize> {
    (0..spec.mechanisms()).filter(|&i| !(stats.birth_exposure(spec, i) > 0.0)).collect()
}

fn setup(
    stats: &SufficientStats,
    spec: &StructuralFunctions,
    init: &ParamVector,
    space: ParamSpace,
) -> Result<(Coords, Vec<FitFlag>)> {
    check_dims(stats, spec, init)?;
    if let ParamSpace::Test(i) = space {
        if i >= spec.mechanisms() {
            return Err(BdpError::Argument(format!("tested mechanism {i} out of range")));
        }
    }
    let mut init = init.clone();
    for a in 0..init.dim() {
        if space != ParamSpace::Test(a) && !(init.get(a) > 0.0) {
            return Err(BdpError::Inadmissible(format!("initial coordinate {a} must be positive")));
        }
    }
    init.space = space;
    let flat = flat_coordinates(stats, spec);
    let free: Vec<usize> = (0..init.dim()).filter(|a| !flat.contains(a)).collect();
    let seed = moment_init(stats, spec).unwrap_or_else(|_| init.clone());
    let scale: Vec<f64> = (0..init.dim()).map(|a| seed.get(a).abs().max(init.get(a).abs()).max(f64::MIN_POSITIVE)).collect();
    let mut flags = Vec::new();
    if !flat.is_empty() {
        flags.push(FitFlag::FlatDirection);
    }
    Ok((Coords::new(space, &init, free, scale), flags))
}

fn boundary_check(coords: &Coords, theta: &ParamVector, outcome: &Outcome, flags: &mut Vec<FitFlag>) {
    let on_edge = coords
        .free
        .iter()
        .any(|&a| !coords.is_natural(a) && theta.get(a) < BOUNDARY_RATIO * coords.scale[a]);
    let barrier = coords.space != ParamSpace::Estimation && outcome.barrier_active;
    if (on_edge || barrier) && !flags.contains(&FitFlag::Boundary) {
        flags.push(FitFlag::Boundary);
    }
}

fn optimization_error(outcome: &Outcome) -> BdpError {
    BdpError::Optimization {
        iterations: outcome.iterations,
        reason: format!("{} (final norm {:e})", outcome.reason, outcome.norm),
    }
}

/// Closed-form unconditional MLE from mechanism-resolved counts.
pub fn mle_marked_closed_form(stats: &SufficientStats, spec: &StructuralFunctions) -> Result<FitResult> {
    let table = stats
        .births_by_mech
        .as_ref()
        .ok_or_else(|| BdpError::Argument("closed form needs mechanism-marked births".into()))?;
    if table.len() != spec.mechanisms() {
        return Err(BdpError::Argument("marked table has the wrong number of mechanisms".into()));
    }
    let mut beta = Vec::with_capacity(table.len());
    let mut flags = Vec::new();
    for (i, row) in table.iter().enumerate() {
        let exposure = stats.birth_exposure(spec, i);
        if !(exposure > 0.0) {
            return Err(BdpError::InsufficientExposure(format!("mechanism {} (zero birth exposure)", i + 1)));
        }
        let count: u64 = row.iter().sum();
        if count == 0 && !flags.contains(&FitFlag::Boundary) {
            flags.push(FitFlag::Boundary);
        }
        beta.push(count as f64 / exposure);
    }
    let dexp = stats.death_exposure(spec);
    if !(dexp > 0.0) {
        return Err(BdpError::InsufficientExposure("the death rate (zero death exposure)".into()));
    }
    let theta_hat = ParamVector::new(beta, stats.total_deaths() as f64 / dexp);
    let loglik = loglik_unconditional(stats, spec, &theta_hat).ok();
    Ok(FitResult {
        kind: EstimatorKind::MarkedClosedForm,
        theta_hat,
        converged: true,
        iterations: 0,
        score_norm: 0.0,
        tolerance: 0.0,
        loglik,
        flags,
        trace: Vec::new(),
    })
}

/// Maximizer of the unconditional log-likelihood (survival ignored).
pub fn mle_unconditional(
    stats: &SufficientStats,
    spec: &StructuralFunctions,
    init: &ParamVector,
    opts: &FitOptions,
) -> Result<FitResult> {
    let (coords, mut flags) = setup(stats, spec, init, ParamSpace::Estimation)?;
    let objective = |z: &[f64]| -> Option<(f64, Vec<f64>)> {
        let theta = coords.to_theta(z);
        let ll = loglik_unconditional(stats, spec, &theta).ok().filter(|v| v.is_finite())?;
        let u = unconditional_score(stats, spec, &theta).ok()?;
        let g = coords.pull_back(&theta, &u.components);
        Some((-ll, g.into_iter().map(|v| -v).collect()))
    };
    let z0 = coords.to_z(&coords.base);
    let outcome = bfgs(objective, &z0, opts.max_iter.max(500), |v| 1e-8 * (1.0 + v.abs()));
    if !outcome.converged {
        return Err(optimization_error(&outcome));
    }
    let theta_hat = coords.to_theta(&outcome.x);
    boundary_check(&coords, &theta_hat, &outcome, &mut flags);
    Ok(FitResult {
        kind: EstimatorKind::Naive,
        theta_hat,
        converged: true,
        iterations: outcome.iterations,
        score_norm: outcome.norm,
        tolerance: 1e-8 * (1.0 + outcome.value.abs()),
        loglik: Some(-outcome.value),
        flags,
        trace: outcome.trace,
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Equation {
    Full,
    Working,
}

fn score_in_z(
    stats: &SufficientStats,
    spec: &StructuralFunctions,
    coords: &Coords,
    eq: Equation,
    z: &[f64],
) -> Option<Vec<f64>> {
    let theta = coords.to_theta(z);
    if z.iter().any(|v| !v.is_finite()) || !validate_admissible(spec, &theta).is_admissible() {
        return None;
    }
    let snap = SpectralSnapshot::new(spec, &theta, eq == Equation::Full).ok()?;
    let u = match eq {
        Equation::Full => full_score_with(stats, spec, &theta, &snap),
        Equation::Working => working_score_with(stats, spec, &theta, &snap),
    }
    .ok()?;
    let g = coords.pull_back(&theta, &u.components);
    g.iter().all(|v| v.is_finite()).then_some(g)
}

fn perturbed_starts(z0: &[f64], count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|s| {
            z0.iter()
                .enumerate()
                .map(|(j, z)| {
                    let sign = if (s + j) % 2 == 0 { 1.0 } else { -1.0 };
                    z + sign * 0.3 * (1.0 + s as f64 / 2.0).min(2.0)
                })
                .collect()
        })
        .collect()
}

fn fit_root(
    stats: &SufficientStats,
    spec: &StructuralFunctions,
    init: &ParamVector,
    opts: &FitOptions,
    eq: Equation,
) -> Result<FitResult> {
    check_dims(stats, spec, init)?;
    check_conditional_data(stats)?;
    let (coords, mut flags) = setup(stats, spec, init, opts.space)?;
    let tol = 1e-6 * (1.0 + stats.horizon);
    let z0 = coords.to_z(&coords.base);
    let f = |z: &[f64]| score_in_z(stats, spec, &coords, eq, z);

    let mut outcome = newton_root(f, &z0, opts.max_iter, tol, FD_STEP);
    if !outcome.converged && eq == Equation::Full {
        // Fallback: ascend the conditional likelihood directly, then polish.
        let objective = |z: &[f64]| -> Option<(f64, Vec<f64>)> {
            let theta = coords.to_theta(z);
            if !validate_admissible(spec, &theta).is_admissible() {
                return None;
            }
            let snap = SpectralSnapshot::new(spec, &theta, true).ok()?;
            let ll = loglik_conditional_with(stats, spec, &theta, &snap).ok().filter(|v| v.is_finite())?;
            let u = full_score_with(stats, spec, &theta, &snap).ok()?;
            let g = coords.pull_back(&theta, &u.components);
            Some((-ll, g.into_iter().map(|v| -v).collect()))
        };
        let ascent = bfgs(objective, &z0, 10 * opts.max_iter, |_| tol);
        let polished = if ascent.converged {
            ascent
        } else {
            let x = ascent.x.clone();
            let mut p = newton_root(f, &x, opts.max_iter, tol, FD_STEP);
            p.iterations += ascent.iterations;
            p
        };
        if polished.converged {
            flags.push(FitFlag::Fallback);
            outcome = polished;
        }
    }
    if !outcome.converged {
        return Err(optimization_error(&outcome));
    }
    let theta_hat = coords.to_theta(&outcome.x);
    boundary_check(&coords, &theta_hat, &outcome, &mut flags);

    if opts.multistart > 0 {
        let disagree = perturbed_starts(&z0, opts.multistart).into_iter().any(|start| {
            let alt = newton_root(f, &start, opts.max_iter, tol, FD_STEP);
            alt.converged
                && alt.x.iter().zip(&outcome.x).any(|(a, b)| (a - b).abs() > MULTISTART_AGREEMENT * (1.0 + b.abs()))
        });
        if disagree {
            flags.push(FitFlag::MultistartDisagreement);
        }
    }

    let loglik = SpectralSnapshot::new(spec, &theta_hat, false)
        .and_then(|snap| loglik_conditional_with(stats, spec, &theta_hat, &snap))
        .ok();
    Ok(FitResult {
        kind: if eq == Equation::Full { EstimatorKind::ConditionalMle } else { EstimatorKind::Qmle },
        theta_hat,
        converged: true,
        iterations: outcome.iterations,
        score_norm: outcome.norm,
        tolerance: tol,
        loglik,
        flags,
        trace: outcome.trace,
    })
}

/// Root of the full score (maximizer of the conditional likelihood).
pub fn fit_conditional_mle(
    stats: &SufficientStats,
    spec: &StructuralFunctions,
    init: &ParamVector,
    opts: &FitOptions,
) -> Result<FitResult> {
    fit_root(stats, spec, init, opts, Equation::Full)
}

/// Root of the working score.
pub fn fit_qmle(
    stats: &SufficientStats,
    spec: &StructuralFunctions,
    init: &ParamVector,
    opts: &FitOptions,
) -> Result<FitResult> {
    fit_root(stats, spec, init, opts, Equation::Working)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn marked_stats() -> (StructuralFunctions, SufficientStats) {
        let spec = StructuralFunctions::sis(4, 2).unwrap();
        let stats = SufficientStats {
            horizon: 10.0,
            occupation: vec![0.0, 2.0, 5.0, 3.0, 0.0],
            births: vec![0, 3, 6, 2, 0],
            deaths: vec![0, 0, 5, 6, 0],
            births_by_mech: Some(vec![vec![0, 3, 4, 1, 0], vec![0, 0, 2, 1, 0]]),
        };
        (spec, stats)
    }

    #[test]
    fn closed_form_ratio() {
        let (spec, stats) = marked_stats();
        let fit = mle_marked_closed_form(&stats, &spec).unwrap();
        let exposure1 = 2.0 * 3.0 + 5.0 * 4.0 + 3.0 * 3.0;
        assert!((fit.theta_hat.beta[0] - 8.0 / exposure1).abs() < 1e-14);
        let dexp = 2.0 + 10.0 + 9.0;
        assert!((fit.theta_hat.mu - 11.0 / dexp).abs() < 1e-14);
        assert!(fit.flags.is_empty());
    }

    #[test]
    fn zero_type_births_flagged() {
        let (spec, mut stats) = marked_stats();
        stats.births_by_mech = Some(vec![vec![0, 3, 6, 2, 0], vec![0; 5]]);
        let fit = mle_marked_closed_form(&stats, &spec).unwrap();
        assert_eq!(fit.theta_hat.beta[1], 0.0);
        assert!(fit.has_flag(FitFlag::Boundary));
    }

    #[test]
    fn zero_exposure_is_an_error() {
        let (spec, mut stats) = marked_stats();
        stats.occupation = vec![0.0, 10.0, 0.0, 0.0, 0.0];
        stats.births = vec![0, 1, 0, 0, 0];
        stats.deaths = vec![0; 5];
        stats.births_by_mech = Some(vec![vec![0, 1, 0, 0, 0], vec![0; 5]]);
        let err = mle_marked_closed_form(&stats, &spec).unwrap_err();
        assert_eq!(err.kind(), "insufficient_exposure");
    }

    #[test]
    fn naive_single_mechanism_matches_ratio() {
        let (_, stats) = marked_stats();
        let spec = StructuralFunctions::sis(4, 1).unwrap();
        let stats = SufficientStats { births_by_mech: None, ..stats };
        let init = ParamVector::new(vec![1.0], 1.0);
        let fit = mle_unconditional(&stats, &spec, &init, &FitOptions::default()).unwrap();
        let exposure = 2.0 * 3.0 + 5.0 * 4.0 + 3.0 * 3.0;
        assert!((fit.theta_hat.beta[0] - 11.0 / exposure).abs() < 1e-7);
        assert!((fit.theta_hat.mu - 11.0 / 21.0).abs() < 1e-7);
    }
}
