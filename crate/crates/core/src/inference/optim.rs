//! Small dense optimizers: BFGS minimization and a damped Newton root finder.
//!
//! Objectives return `None` outside their domain; line searches treat that as
//! an infinite value and shorten the step (the admissibility barrier).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

const MAX_HALVINGS: usize = 40;
const ARMIJO: f64 = 1e-4;
/// Largest step taken in any single coordinate.
const MAX_STEP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Objective value (minimization) or residual norm (root finding).
    pub value: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    /// Gradient norm (minimization) or residual norm (root finding).
    pub norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Line-search trials rejected because the objective was undefined.
    pub barrier_hits: usize,
    /// Whether the last accepted step was shortened by the barrier.
    pub barrier_active: bool,
    pub trace: Vec<TraceEntry>,
    pub reason: String,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cap_step(d: &mut [f64]) -> f64 {
    let biggest = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if biggest > MAX_STEP {
        let s = MAX_STEP / biggest;
        d.iter_mut().for_each(|x| *x *= s);
    }
    biggest
}

/// Minimizes `f` with BFGS and a backtracking Armijo line search.
///
/// `f` returns the value and gradient; `tol(value)` is the gradient-norm
/// threshold for convergence.
pub fn bfgs<F, T>(mut f: F, x0: &[f64], max_iter: usize, tol: T) -> Outcome
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    T: Fn(f64) -> f64,
{
    let d = x0.len();
    let mut x = x0.to_vec();
    let mut trace = Vec::new();
    let Some((mut fx, mut gx)) = f(&x).filter(|(v, g)| v.is_finite() && g.iter().all(|z| z.is_finite())) else {
        return Outcome {
            x,
            value: f64::NAN,
            norm: f64::NAN,
            iterations: 0,
            converged: false,
            barrier_hits: 1,
            barrier_active: true,
            trace,
            reason: "objective undefined at the starting point".into(),
        };
    };
    let mut hinv = DMatrix::<f64>::identity(d, d);
    let mut first = true;
    let mut barrier_hits = 0;
    let mut barrier_active = false;
    let mut reason = String::from("iteration budget exhausted");
    let mut converged = norm(&gx) <= tol(fx);
    let mut it = 0;
    trace.push(TraceEntry { iteration: 0, value: fx, grad_norm: norm(&gx), step: 0.0 });

    while !converged && it < max_iter {
        it += 1;
        let g = DVector::from_column_slice(&gx);
        let mut dir: Vec<f64> = (-(&hinv * &g)).iter().copied().collect();
        let descent: f64 = dir.iter().zip(&gx).map(|(a, b)| a * b).sum();
        if !(descent < 0.0) {
            hinv = DMatrix::identity(d, d);
            dir = gx.iter().map(|v| -v).collect();
        }
        cap_step(&mut dir);
        let slope: f64 = dir.iter().zip(&gx).map(|(a, b)| a * b).sum();

        let mut alpha = 1.0;
        let mut accepted = None;
        barrier_active = false;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + alpha * b).collect();
            match f(&trial) {
                Some((v, g)) if v.is_finite() && g.iter().all(|z| z.is_finite()) => {
                    if v <= fx + ARMIJO * alpha * slope {
                        accepted = Some((trial, v, g));
                        break;
                    }
                }
                _ => {
                    barrier_hits += 1;
                    barrier_active = true;
                }
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            reason = "line search failed to decrease the objective".into();
            break;
        };
        let s = DVector::from_iterator(d, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(d, gnew.iter().zip(&gx).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-300 {
            if first {
                hinv *= sy / y.dot(&y);
                first = false;
            }
            let rho = 1.0 / sy;
            let id = DMatrix::<f64>::identity(d, d);
            let left = &id - rho * &s * y.transpose();
            let right = &id - rho * &y * s.transpose();
            hinv = &left * &hinv * &right + rho * &s * s.transpose();
        }
        x = xn;
        fx = fnew;
        gx = gnew;
        let gn = norm(&gx);
        trace.push(TraceEntry { iteration: it, value: fx, grad_norm: gn, step: s.norm() });
        converged = gn <= tol(fx);
    }
    if converged {
        reason = "converged".into();
    }
    Outcome { norm: norm(&gx), x, value: fx, iterations: it, converged, barrier_hits, barrier_active, trace, reason }
}

/// Central-difference Jacobian; falls back to one-sided differences at the barrier.
pub fn fd_jacobian<F>(f: &mut F, x: &[f64], fx: &[f64], h: f64) -> Option<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Option<Vec<f64>>,
{
    let d = x.len();
    let m = fx.len();
    let mut jac = DMatrix::<f64>::zeros(m, d);
    for j in 0..d {
        let step = h * (1.0 + x[j].abs());
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += step;
        xm[j] -= step;
        let col: Vec<f64> = match (f(&xp), f(&xm)) {
            (Some(p), Some(q)) => p.iter().zip(&q).map(|(a, b)| (a - b) / (2.0 * step)).collect(),
            (Some(p), None) => p.iter().zip(fx).map(|(a, b)| (a - b) / step).collect(),
            (None, Some(q)) => fx.iter().zip(&q).map(|(a, b)| (a - b) / step).collect(),
            (None, None) => return None,
        };
        for i in 0..m {
            jac[(i, j)] = col[i];
        }
    }
    Some(jac)
}

/// Damped Newton iteration for `F(x) = 0` with a finite-difference Jacobian.
///
/// Steps are halved until the residual norm decreases (and the residual is
/// defined); convergence means `||F|| <= tol`.
pub fn newton_root<F>(mut f: F, x0: &[f64], max_iter: usize, tol: f64, fd_step: f64) -> Outcome
where
    F: FnMut(&[f64]) -> Option<Vec<f64>>,
{
    let mut x = x0.to_vec();
    let mut trace = Vec::new();
    let Some(mut fx) = f(&x).filter(|v| v.iter().all(|z| z.is_finite())) else {
        return Outcome {
            x,
            value: f64::NAN,
            norm: f64::NAN,
            iterations: 0,
            converged: false,
            barrier_hits: 1,
            barrier_active: true,
            trace,
            reason: "estimating function undefined at the starting point".into(),
        };
    };
    let mut fnorm = norm(&fx);
    let mut converged = fnorm <= tol;
    let mut barrier_hits = 0;
    let mut barrier_active = false;
    let mut reason = String::from("iteration budget exhausted");
    let mut it = 0;
    trace.push(TraceEntry { iteration: 0, value: fnorm, grad_norm: fnorm, step: 0.0 });

    while !converged && it < max_iter {
        it += 1;
        let Some(jac) = fd_jacobian(&mut f, &x, &fx, fd_step) else {
            reason = "Jacobian undefined around the current point".into();
            break;
        };
        let rhs = DVector::from_column_slice(&fx);
        let newton = jac.clone().lu().solve(&rhs).filter(|s| s.iter().all(|z| z.is_finite()));
        let mut dir: Vec<f64> = match newton {
            Some(s) => s.iter().map(|v| -v).collect(),
            // Singular Jacobian: steepest descent on ||F||^2 / 2.
            None => (jac.transpose() * &rhs).iter().map(|v| -v).collect(),
        };
        cap_step(&mut dir);

        let mut alpha = 1.0;
        let mut accepted = None;
        barrier_active = false;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + alpha * b).collect();
            match f(&trial) {
                Some(v) if v.iter().all(|z| z.is_finite()) => {
                    let n = norm(&v);
                    if n < (1.0 - ARMIJO * alpha) * fnorm {
                        accepted = Some((trial, v, n));
                        break;
                    }
                }
                _ => {
                    barrier_hits += 1;
                    barrier_active = true;
                }
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew, nnew)) = accepted else {
            reason = "line search failed to reduce the residual".into();
            break;
        };
        let step = alpha * norm(&dir);
        x = xn;
        fx = fnew;
        fnorm = nnew;
        trace.push(TraceEntry { iteration: it, value: fnorm, grad_norm: fnorm, step });
        converged = fnorm <= tol;
    }
    if converged {
        reason = "converged".into();
    }
    Outcome { x, value: fnorm, norm: fnorm, iterations: it, converged, barrier_hits, barrier_active, trace, reason }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfgs_rosenbrock() {
        let out = bfgs(
            |x| {
                let (a, b) = (x[0], x[1]);
                let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
                Some((v, g))
            },
            &[-1.2, 1.0],
            500,
            |_| 1e-10,
        );
        assert!(out.converged, "{}", out.reason);
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn newton_with_barrier() {
        // Root of log(x) - 1 with the domain x > 0, started far to the right.
        let out = newton_root(|x| (x[0] > 0.0).then(|| vec![x[0].ln() - 1.0]), &[0.01], 100, 1e-12, 1e-6);
        assert!(out.converged, "{}", out.reason);
        assert!((out.x[0] - std::f64::consts::E).abs() < 1e-9);
    }
}
