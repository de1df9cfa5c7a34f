//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use bdp_core::model::{ParamSpace, ParamVector, StructuralFunctions};
use bdp_core::rng::{RngStream, StreamRng};
use bdp_core::simulate::{Direction, Trajectory};
use bdp_core::spectral::KilledGenerator;
use nalgebra::{DMatrix, SymmetricEigen};

/// Scaled SIS parameters `beta_i = b_i / N^i`.
pub fn sis_theta(n: usize, b: &[f64], mu: f64) -> ParamVector {
    let beta = b.iter().enumerate().map(|(i, bi)| bi / (n as f64).powi(i as i32 + 1)).collect();
    ParamVector::new(beta, mu)
}

pub fn large_spec() -> StructuralFunctions {
    StructuralFunctions::sis(100, 2).unwrap()
}

pub fn large_theta() -> ParamVector {
    sis_theta(100, &[1.01, 3.7], 1.0)
}

pub fn small_spec() -> StructuralFunctions {
    StructuralFunctions::sis(10, 2).unwrap()
}

pub fn small_theta() -> ParamVector {
    ParamVector::new(vec![0.101, 0.037], 1.0)
}

/// A random SIS instance with `N` from `sizes`, `K <= 3`, and moderate rates.
pub fn random_instance(rng: &mut StreamRng, sizes: &[usize]) -> (StructuralFunctions, ParamVector) {
    let n = sizes[(rng.uniform() * sizes.len() as f64) as usize];
    let k = 1 + (rng.uniform() * 3.0) as usize;
    let k = k.min(n - 1);
    let b: Vec<f64> = (0..k).map(|_| 0.3 + 2.7 * rng.uniform()).collect();
    let mu = 0.5 + 1.5 * rng.uniform();
    (StructuralFunctions::sis(n, k).unwrap(), sis_theta(n, &b, mu))
}

pub fn rng(seed: u64) -> StreamRng {
    RngStream::new(seed, 0).attempt(0)
}

/// Five-point central difference of `f` at `x` along coordinate `a`.
pub fn fd5<F: Fn(&ParamVector) -> Vec<f64>>(f: F, theta: &ParamVector, a: usize, rel_step: f64) -> Vec<f64> {
    let h = rel_step * theta.get(a).abs().max(1e-12);
    let eval = |m: f64| {
        let mut t = theta.clone();
        t.set(a, theta.get(a) + m * h);
        f(&t)
    };
    let (p2, p1, m1, m2) = (eval(2.0), eval(1.0), eval(-1.0), eval(-2.0));
    (0..p1.len()).map(|i| (-p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * h)).collect()
}

/// `|a - b| / max(|b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

/// Principal eigenpair from a dense symmetric eigensolver on the symmetrized generator.
///
/// Returns `(gamma, h)` with `h(1) = 1`, indexed by state.
pub fn dense_principal(g: &KilledGenerator) -> (f64, Vec<f64>) {
    let n = g.capacity();
    // S = D Q D^-1 with d(k+1)/d(k) = sqrt(lambda_k / mu_{k+1}).
    let mut log_d = vec![0.0; n + 1];
    for k in 1..n {
        log_d[k + 1] = log_d[k] + 0.5 * (g.birth(k).ln() - g.death(k + 1).ln());
    }
    let s = DMatrix::from_fn(n, n, |i, j| {
        let (a, b) = (i + 1, j + 1);
        if a == b {
            g.diag(a)
        } else if b == a + 1 || a == b + 1 {
            let lo = a.min(b);
            (g.birth(lo) * g.death(lo + 1)).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(s);
    let (idx, gamma) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let x = eig.eigenvectors.column(idx);
    let mut h = vec![0.0; n + 1];
    for k in 1..=n {
        h[k] = x[k - 1] / log_d[k].exp();
    }
    let h1 = h[1];
    h.iter_mut().for_each(|v| *v /= h1);
    (gamma, h)
}

/// Event-by-event log-likelihood with arbitrary per-state birth/death rates.
///
/// `birth_mark(i, k)` is the rate of type-`i` births at `k` (marked paths).
pub fn event_loglik(
    traj: &Trajectory,
    birth: &dyn Fn(usize) -> f64,
    death: &dyn Fn(usize) -> f64,
    birth_mark: Option<&dyn Fn(usize, usize) -> f64>,
) -> f64 {
    let mut ll = 0.0;
    let mut x = traj.x0;
    let mut last = 0.0;
    for e in &traj.events {
        ll -= (e.t - last) * (birth(x) + death(x));
        last = e.t;
        match e.direction {
            Direction::Birth => {
                ll += match (birth_mark, e.mark) {
                    (Some(f), Some(i)) => f(i, x).ln(),
                    _ => birth(x).ln(),
                };
                x += 1;
            }
            Direction::Death => {
                ll += death(x).ln();
                x -= 1;
            }
        }
    }
    ll -= (traj.horizon - last) * (birth(x) + death(x));
    ll
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

pub fn covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let means: Vec<f64> = (0..d).map(|a| rows.iter().map(|r| r[a]).sum::<f64>() / n).collect();
    DMatrix::from_fn(d, d, |a, b| {
        rows.iter().map(|r| (r[a] - means[a]) * (r[b] - means[b])).sum::<f64>() / (n - 1.0)
    })
}

/// Largest `|C_ab - V_ab| / sqrt(V_aa V_bb)` over all entries.
pub fn scaled_entry_error(c: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let d = v.nrows();
    let mut worst: f64 = 0.0;
    for a in 0..d {
        for b in 0..d {
            worst = worst.max((c[(a, b)] - v[(a, b)]).abs() / (v[(a, a)] * v[(b, b)]).sqrt());
        }
    }
    worst
}

pub fn test_space(theta: &ParamVector, i: usize) -> ParamVector {
    theta.clone().with_space(ParamSpace::Test(i))
}
