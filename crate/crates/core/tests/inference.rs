mod common;

use bdp_core::inference::*;
use bdp_core::model::{ParamVector, StructuralFunctions};
use bdp_core::rng::RngStream;
use bdp_core::simulate::{simulate_original, simulate_q_process};
use bdp_core::spectral::SpectralSnapshot;
use common::*;
use nalgebra::DMatrix;
use rayon::prelude::*;

fn q_stats(spec: &StructuralFunctions, theta: &ParamVector, x0: usize, t: f64, seed: u64, rep: u64, marked: bool) -> SufficientStats {
    let traj = simulate_q_process(spec, theta, x0, t, &RngStream::new(seed, rep), marked).unwrap();
    SufficientStats::from_trajectory(&traj, spec.mechanisms()).unwrap()
}

#[test]
fn occupation_partitions_the_window() {
    let spec = small_spec();
    let theta = small_theta();
    for rep in 0..1000 {
        let traj = simulate_original(&spec, &theta, 5, 20.0, &RngStream::new(3, rep), rep % 2 == 0).unwrap();
        let s = SufficientStats::from_trajectory(&traj, 2).unwrap();
        assert!((s.occupation.iter().sum::<f64>() - 20.0).abs() <= 1e-12 * 20.0);
        s.validate(&spec).unwrap();
        assert_eq!(s.is_marked(), traj.marked);
    }
}

#[test]
fn statistics_form_matches_event_sums() {
    let mut r = rng(17);
    for rep in 0..100 {
        let (spec, theta) = random_instance(&mut r, &[5, 10, 20]);
        let n = spec.capacity();
        let marked = rep % 2 == 1;
        let x0 = 1 + (r.uniform() * n as f64) as usize % n;
        let horizon = 5.0 + 20.0 * r.uniform();
        let traj = simulate_original(&spec, &theta, x0, horizon, &RngStream::new(99, rep), marked).unwrap();
        let stats = SufficientStats::from_trajectory(&traj, spec.mechanisms()).unwrap();

        let birth = |k: usize| if k == 0 || k >= n { 0.0 } else { (0..spec.mechanisms()).map(|i| theta.beta[i] * spec.f(i, k)).sum() };
        let death = |k: usize| theta.mu * spec.r(k);
        let typed = |i: usize, k: usize| theta.beta[i] * spec.f(i, k);
        let oracle = event_loglik(&traj, &birth, &death, marked.then_some(&typed as &dyn Fn(usize, usize) -> f64));
        let value = loglik_unconditional(&stats, &spec, &theta).unwrap();
        assert!(rel_err(value, oracle, 1.0) < 1e-10, "unconditional {value} vs {oracle}");

        // Conditional form on Q-process paths.
        let traj = simulate_q_process(&spec, &theta, x0, horizon, &RngStream::new(98, rep), marked).unwrap();
        let stats = SufficientStats::from_trajectory(&traj, spec.mechanisms()).unwrap();
        let snap = SpectralSnapshot::new(&spec, &theta, false).unwrap();
        let q = &snap.tilted;
        let tb = |k: usize| q.lambda_tilde[k];
        let td = |k: usize| q.mu_tilde[k];
        let ttyped = |i: usize, k: usize| theta.beta[i] * spec.f(i, k) * q.r_plus[k];
        let oracle = event_loglik(&traj, &tb, &td, marked.then_some(&ttyped as &dyn Fn(usize, usize) -> f64));
        let value = loglik_conditional(&stats, &spec, &theta).unwrap();
        assert!(rel_err(value, oracle, 1.0) < 1e-10, "conditional {value} vs {oracle}");
    }
}

#[test]
fn full_score_is_the_gradient_of_the_conditional_loglik() {
    let mut r = rng(23);
    for rep in 0..20 {
        let (spec, theta) = random_instance(&mut r, &[5, 10, 20]);
        let n = spec.capacity();
        let stats = q_stats(&spec, &theta, 1 + n / 2, 50.0, 4, rep, rep % 2 == 0);
        // Evaluate away from the truth so the score is not near zero.
        let mut at = theta.clone();
        for a in 0..at.dim() {
            at.set(a, at.get(a) * (1.0 + 0.1 * (r.uniform() - 0.5)));
        }
        let u = full_score(&stats, &spec, &at).unwrap();
        for a in 0..at.dim() {
            let fd = fd5(|t| vec![loglik_conditional(&stats, &spec, t).unwrap()], &at, a, 1e-3)[0];
            let floor = 1e-3 * u.norm() * at.get(a).abs().recip().min(1.0);
            assert!(rel_err(u.components[a], fd, floor.max(1e-8)) < 1e-5, "rep {rep} coordinate {a}: {} vs {fd}", u.components[a]);
        }
    }
}

#[test]
fn unconditional_score_is_the_gradient_of_the_unconditional_loglik() {
    let mut r = rng(29);
    for rep in 0..10 {
        let (spec, theta) = random_instance(&mut r, &[5, 10]);
        let traj = simulate_original(&spec, &theta, 3, 30.0, &RngStream::new(5, rep), rep % 2 == 0).unwrap();
        let stats = SufficientStats::from_trajectory(&traj, spec.mechanisms()).unwrap();
        let u = unconditional_score(&stats, &spec, &theta).unwrap();
        for a in 0..theta.dim() {
            let fd = fd5(|t| vec![loglik_unconditional(&stats, &spec, t).unwrap()], &theta, a, 1e-4)[0];
            assert!(rel_err(u.components[a], fd, 1e-6 * u.norm()) < 1e-6);
        }
    }
}

#[test]
fn working_score_is_full_score_without_tilt_terms() {
    let spec = small_spec();
    let theta = small_theta();
    let snap = SpectralSnapshot::new(&spec, &theta, true).unwrap();
    let sens = snap.sensitivities();
    for marked in [false, true] {
        let stats = q_stats(&spec, &theta, 5, 100.0, 8, 0, marked);
        let full = full_score_with(&stats, &spec, &theta, &snap).unwrap();
        let work = working_score_with(&stats, &spec, &theta, &snap).unwrap();
        for a in 0..3 {
            let mut tilt = 0.0;
            for k in 1..10 {
                tilt += sens.dlog_r_plus[a][k] * (stats.births[k] as f64 - snap.tilted.lambda_tilde[k] * stats.occupation[k]);
            }
            for k in 2..=10 {
                tilt += sens.dlog_r_minus[a][k] * (stats.deaths[k] as f64 - snap.tilted.mu_tilde[k] * stats.occupation[k]);
            }
            let scale = full.norm().max(1.0);
            assert!((full.components[a] - tilt - work.components[a]).abs() < 1e-12 * scale);
        }
    }
}

#[test]
fn scores_are_centered_at_the_truth() {
    let spec = small_spec();
    let theta = small_theta();
    let t = 200.0;
    for marked in [false, true] {
        let scores: Vec<(Vec<f64>, Vec<f64>)> = (0..200u64)
            .into_par_iter()
            .map(|rep| {
                let stats = q_stats(&spec, &theta, 5, t, 31, rep, marked);
                let full = full_score(&stats, &spec, &theta).unwrap().components;
                let work = working_score(&stats, &spec, &theta).unwrap().components;
                (full, work)
            })
            .collect();
        for a in 0..3 {
            for pick in [0, 1] {
                let xs: Vec<f64> = scores.iter().map(|(f, w)| if pick == 0 { f[a] } else { w[a] } / t.sqrt()).collect();
                let z = mean(&xs) / (sd(&xs) / (xs.len() as f64).sqrt());
                assert!(z.abs() < 3.0, "marked={marked} score {pick} coordinate {a}: z = {z}");
            }
        }
    }
}

#[test]
fn closed_form_matches_numerical_maximization() {
    let spec = small_spec();
    let theta = small_theta();
    let traj = simulate_original(&spec, &ParamVector::new(vec![0.3, 0.05], 1.0), 5, 200.0, &RngStream::new(2, 0), true).unwrap();
    let stats = SufficientStats::from_trajectory(&traj, 2).unwrap();
    let closed = mle_marked_closed_form(&stats, &spec).unwrap();
    let numeric = mle_unconditional(&stats, &spec, &theta, &FitOptions::default()).unwrap();
    for a in 0..3 {
        assert!(rel_err(numeric.theta_hat.get(a), closed.theta_hat.get(a), 1e-300) < 1e-8);
    }
}

#[test]
fn naive_mle_recovers_unconditional_truth() {
    let spec = StructuralFunctions::sis(20, 2).unwrap();
    let truth = sis_theta(20, &[2.0, 1.0], 1.0);
    let traj = simulate_original(&spec, &truth, 10, 300.0, &RngStream::new(12, 0), false).unwrap();
    let stats = SufficientStats::from_trajectory(&traj, 2).unwrap();
    let init = default_init(&stats, &spec).unwrap();
    let fit = mle_unconditional(&stats, &spec, &init, &FitOptions::default()).unwrap();
    // Observed information of the unconditional likelihood (negative Hessian).
    let mut info = DMatrix::<f64>::zeros(3, 3);
    for k in 1..20 {
        let lambda: f64 = (0..2).map(|i| fit.theta_hat.beta[i] * spec.f(i, k)).sum();
        for a in 0..2 {
            for b in 0..2 {
                info[(a, b)] += stats.births[k] as f64 * spec.f(a, k) * spec.f(b, k) / (lambda * lambda);
            }
        }
    }
    info[(2, 2)] = stats.total_deaths() as f64 / fit.theta_hat.mu.powi(2);
    let cov = info.try_inverse().unwrap();
    for a in 0..3 {
        let z = (fit.theta_hat.get(a) - truth.get(a)) / cov[(a, a)].sqrt();
        assert!(z.abs() < 3.0, "coordinate {a}: z = {z}");
    }
}

#[test]
fn conditional_loglik_peaks_at_the_generating_parameter() {
    let spec = small_spec();
    let theta = small_theta();
    let perturbed = [
        ParamVector::new(vec![0.12, 0.037], 1.0),
        ParamVector::new(vec![0.101, 0.03], 1.0),
        ParamVector::new(vec![0.101, 0.037], 1.15),
    ];
    let diffs: Vec<Vec<f64>> = (0..50u64)
        .map(|rep| {
            let stats = q_stats(&spec, &theta, 5, 100.0, 41, rep, false);
            let base = loglik_conditional(&stats, &spec, &theta).unwrap();
            perturbed.iter().map(|p| base - loglik_conditional(&stats, &spec, p).unwrap()).collect()
        })
        .collect();
    for j in 0..perturbed.len() {
        let avg = diffs.iter().map(|d| d[j]).sum::<f64>() / diffs.len() as f64;
        assert!(avg > 0.0, "perturbation {j}: mean difference {avg}");
    }
}

#[test]
fn refit_from_root_is_immediate() {
    let spec = small_spec();
    let theta = small_theta();
    let stats = q_stats(&spec, &theta, 5, 500.0, 43, 0, false);
    let init = default_init(&stats, &spec).unwrap();
    for fit in [fit_conditional_mle, fit_qmle] {
        let first = fit(&stats, &spec, &init, &FitOptions::default()).unwrap();
        assert!(first.converged && first.score_norm <= first.tolerance);
        let again = fit(&stats, &spec, &first.theta_hat, &FitOptions::default()).unwrap();
        assert!(again.iterations <= 2);
        for a in 0..3 {
            assert!(rel_err(again.theta_hat.get(a), first.theta_hat.get(a), 1e-300) < 1e-6);
        }
    }
}

#[test]
fn qmle_and_mle_agree_within_scatter() {
    let spec = small_spec();
    let theta = small_theta();
    let diffs: Vec<Vec<f64>> = (0..40u64)
        .into_par_iter()
        .map(|rep| {
            let stats = q_stats(&spec, &theta, 5, 500.0, 47, rep, true).unmarked();
            let init = default_init(&stats, &spec).unwrap();
            let a = fit_conditional_mle(&stats, &spec, &init, &FitOptions::default()).unwrap();
            let b = fit_qmle(&stats, &spec, &init, &FitOptions::default()).unwrap();
            (0..3).map(|i| a.theta_hat.get(i) - b.theta_hat.get(i)).collect()
        })
        .collect();
    for i in 0..3 {
        let xs: Vec<f64> = diffs.iter().map(|d| d[i]).collect();
        let z = mean(&xs) / (sd(&xs) / (xs.len() as f64).sqrt());
        assert!(z.abs() < 3.5, "coordinate {i}: paired z = {z}");
    }
}

#[test]
fn test_space_fit_allows_negative_estimates() {
    let spec = large_spec();
    let theta = test_space(&sis_theta(100, &[2.875, 0.0], 1.0), 1);
    let mut negatives = 0;
    for rep in 0..6u64 {
        let traj = simulate_q_process(&spec, &theta, 10, 300.0, &RngStream::new(51, rep), false).unwrap();
        let stats = SufficientStats::from_trajectory(&traj, 2).unwrap();
        let init = default_init(&stats, &spec).unwrap();
        let fit = fit_conditional_mle(&stats, &spec, &init, &FitOptions::test(1)).unwrap();
        assert!(fit.converged);
        assert!(!fit.has_flag(FitFlag::Boundary));
        if fit.theta_hat.beta[1] < 0.0 {
            negatives += 1;
        }
    }
    assert!(negatives > 0, "no negative estimate in six null replicates");
}

#[test]
fn inconsistent_data_is_rejected() {
    let spec = small_spec();
    let theta = small_theta();
    let traj = simulate_original(&spec, &theta, 1, 100.0, &RngStream::new(1, 1), false).unwrap();
    let stats = SufficientStats::from_trajectory(&traj, 2).unwrap();
    if stats.deaths[1] > 0 {
        let err = full_score(&stats, &spec, &theta).unwrap_err();
        assert_eq!(err.kind(), "data_inconsistency");
        let err = fit_qmle(&stats, &spec, &theta, &FitOptions::default()).unwrap_err();
        assert_eq!(err.kind(), "data_inconsistency");
    }
}

#[test]
fn fit_report_round_trips_through_json() {
    let spec = small_spec();
    let theta = small_theta();
    let stats = q_stats(&spec, &theta, 5, 100.0, 53, 0, false);
    let fit = fit_qmle(&stats, &spec, &default_init(&stats, &spec).unwrap(), &FitOptions::default()).unwrap();
    let json = serde_json::to_string(&fit).unwrap();
    let back: FitResult = serde_json::from_str(&json).unwrap();
    assert_eq!(fit, back);
    let json = serde_json::to_string(&stats).unwrap();
    let back: SufficientStats = serde_json::from_str(&json).unwrap();
    assert_eq!(stats, back);
}
