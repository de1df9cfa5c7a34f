use crate::error::{BdpError, Result};
use crate::model::{ParamVector, StructuralFunctions};
use crate::spectral::SpectralSnapshot;

use super::stats::SufficientStats;

/// `n log(rate)` with `0 log 0 = 0`; a positive count at a nonpositive rate is `-inf`.
pub(crate) fn xlogy(n: f64, rate: f64) -> f64 {
    if n == 0.0 {
        0.0
    } else if rate > 0.0 {
        n * rate.ln()
    } else {
        f64::NEG_INFINITY
    }
}

pub(crate) fn check_dims(stats: &SufficientStats, spec: &StructuralFunctions, theta: &ParamVector) -> Result<()> {
    if theta.beta.len() != spec.mechanisms() {
        return Err(BdpError::Argument(format!(
            "parameter has {} birth coordinates, model has {} mechanisms",
            theta.beta.len(),
            spec.mechanisms()
        )));
    }
    stats.validate(spec)
}

/// The conditional law never visits 0 and never dies from state 1.
pub(crate) fn check_conditional_data(stats: &SufficientStats) -> Result<()> {
    if stats.deaths.get(1).copied().unwrap_or(0) > 0 {
        return Err(BdpError::DataInconsistency(
            "death recorded at state 1: impossible under the surviving dynamics".into(),
        ));
    }
    if stats.occupation[0] > 0.0 {
        return Err(BdpError::DataInconsistency("path spends time in the absorbing state".into()));
    }
    Ok(())
}

/// Log-likelihood of the observed path under the original (unconditioned) law.
///
/// Uses the mechanism-resolved birth terms when `stats` carries marks.
/// Zero rates are allowed: `0 log 0 = 0`, while a count at a zero-rate state
/// gives `-inf`.
pub fn loglik_unconditional(stats: &SufficientStats, spec: &StructuralFunctions, theta: &ParamVector) -> Result<f64> {
    check_dims(stats, spec, theta)?;
    if theta.to_vec().iter().any(|x| !x.is_finite()) {
        return Err(BdpError::Argument("non-finite parameter".into()));
    }
    let n = spec.capacity();
    let mut ll = 0.0;
    for k in 1..=n {
        let lambda = if k < n { spec.lambda(&theta.beta, k) } else { 0.0 };
        let death = theta.mu * spec.r(k);
        if lambda < 0.0 || death < 0.0 {
            return Err(BdpError::Inadmissible(format!("negative rate at state {k}")));
        }
        if stats.births_by_mech.is_none() {
            ll += xlogy(stats.births[k] as f64, lambda);
        }
        ll += xlogy(stats.deaths[k] as f64, death);
        ll -= stats.occupation[k] * (lambda + death);
    }
    if let Some(table) = &stats.births_by_mech {
        for (i, row) in table.iter().enumerate() {
            for k in 1..n {
                ll += xlogy(row[k] as f64, theta.beta[i] * spec.f(i, k));
            }
        }
    }
    Ok(ll)
}

/// Conditional log-likelihood: the path treated as a Q-process trajectory.
pub fn loglik_conditional(stats: &SufficientStats, spec: &StructuralFunctions, theta: &ParamVector) -> Result<f64> {
    check_dims(stats, spec, theta)?;
    check_conditional_data(stats)?;
    let snap = SpectralSnapshot::new(spec, theta, false)?;
    loglik_conditional_with(stats, spec, theta, &snap)
}

/// [`loglik_conditional`] against precomputed spectral data at `theta`.
pub fn loglik_conditional_with(
    stats: &SufficientStats,
    spec: &StructuralFunctions,
    theta: &ParamVector,
    snap: &SpectralSnapshot,
) -> Result<f64> {
    check_conditional_data(stats)?;
    let n = spec.capacity();
    let q = &snap.tilted;
    let mut ll = 0.0;
    for k in 1..=n {
        if stats.births_by_mech.is_none() && k < n {
            ll += xlogy(stats.births[k] as f64, q.lambda_tilde[k]);
        }
        if k >= 2 {
            ll += xlogy(stats.deaths[k] as f64, q.mu_tilde[k]);
        }
        ll -= stats.occupation[k] * (q.lambda_tilde[k] + q.mu_tilde[k]);
    }
    if let Some(table) = &stats.births_by_mech {
        for (i, row) in table.iter().enumerate() {
            for k in 1..n {
                ll += xlogy(row[k] as f64, theta.beta[i] * spec.f(i, k) * q.r_plus[k]);
            }
        }
    }
    Ok(ll)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_at(n: usize, k: usize, t: f64) -> SufficientStats {
        let mut occupation = vec![0.0; n + 1];
        occupation[k] = t;
        SufficientStats {
            horizon: t,
            occupation,
            births: vec![0; n + 1],
            deaths: vec![0; n + 1],
            births_by_mech: None,
        }
    }

    #[test]
    fn pure_compensator() {
        let spec = StructuralFunctions::sis(5, 1).unwrap();
        let theta = ParamVector::new(vec![0.3], 0.7);
        let s = stats_at(5, 2, 4.0);
        let lambda = 0.3 * 2.0 * 3.0;
        let expected = -4.0 * (lambda + 0.7 * 2.0);
        assert!((loglik_unconditional(&s, &spec, &theta).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn one_more_death_adds_log_rate() {
        let spec = StructuralFunctions::sis(5, 1).unwrap();
        let theta = ParamVector::new(vec![0.3], 0.7);
        let mut s = stats_at(5, 3, 4.0);
        let before = loglik_unconditional(&s, &spec, &theta).unwrap();
        s.deaths[3] = 1;
        let after = loglik_unconditional(&s, &spec, &theta).unwrap();
        assert!((after - before - (0.7f64 * 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn count_at_zero_rate_is_minus_infinity() {
        let spec = StructuralFunctions::sis(5, 2).unwrap();
        let theta = ParamVector::new(vec![0.3, 0.0], 0.7);
        let mut s = stats_at(5, 3, 1.0);
        s.births[3] = 1;
        s.births_by_mech = Some(vec![vec![0; 6], vec![0, 0, 0, 1, 0, 0]]);
        assert_eq!(loglik_unconditional(&s, &spec, &theta).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn two_state_conditional_value() {
        let spec = StructuralFunctions::sis(2, 1).unwrap();
        let theta = ParamVector::new(vec![1.0], 1.0);
        let s = SufficientStats {
            horizon: 2.0,
            occupation: vec![0.0, 1.0, 1.0],
            births: vec![0, 1, 0],
            deaths: vec![0, 0, 1],
            births_by_mech: None,
        };
        let expected = 2.0f64.ln() - 2.0 * 2.0f64.sqrt();
        assert!((loglik_conditional(&s, &spec, &theta).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn death_from_one_is_inconsistent() {
        let spec = StructuralFunctions::sis(3, 1).unwrap();
        let theta = ParamVector::new(vec![1.0], 1.0);
        let mut s = stats_at(3, 1, 1.0);
        s.deaths[1] = 1;
        s.occupation = vec![0.5, 0.5, 0.0, 0.0];
        let err = loglik_conditional(&s, &spec, &theta).unwrap_err();
        assert_eq!(err.kind(), "data_inconsistency");
    }
}
