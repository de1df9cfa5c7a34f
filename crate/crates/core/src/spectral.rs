//! Killed generator, principal eigendata, Doob h-transform and eigen-sensitivities.
//!
//! The killed generator `Q+` on `{1..N}` is tridiagonal with strictly positive
//! off-diagonal products `lambda_k mu_{k+1}`, hence diagonally similar to a
//! symmetric tridiagonal matrix. Its spectrum is real and simple, and the
//! principal eigenvalue is located by Sturm-count bisection.
//!
//! Given the eigenvalue `gamma`, the eigenvector ratios come from a twisted
//! factorization of `Q+ - gamma I`: top-down pivots `p_k` and bottom-up
//! pivots `q_k` give
//!
//! ```text
//! h(k+1)/h(k) = -p_k / lambda_k         (below the twist index)
//! h(k+1)/h(k) = -mu_{k+1} / q_{k+1}     (at or above it)
//! ```
//!
//! so `lambda~_k = -p_k` below the twist and `mu~_k = -q_k` above it. Each
//! recurrence is only run in the direction in which it is stable; the twist
//! index is where the two factorizations agree best. All tables below are
//! indexed by state `0..=N`; entries at states where a quantity is undefined
//! hold `0.0`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{BdpError, Result};
use crate::model::{validate_admissible, ParamVector, RateVector, StructuralFunctions};

/// Poisson tail mass at which uniformization is truncated.
const UNIFORMIZATION_TAIL: f64 = 1e-14;
/// Largest uniformized rate-time product handled without interval halving.
const DIRECT_UNIFORMIZATION_LIMIT: f64 = 64.0;
const MAX_HALVINGS: u32 = 64;
const MIN_GAP: f64 = 1e-12;

/// Restriction of the generator to the transient states `1..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct KilledGenerator {
    /// `lambda_k` for `k = 0..=N` (zero at both ends).
    birth: Vec<f64>,
    /// `mu_k` for `k = 0..=N`; `mu_1` is the killing rate.
    death: Vec<f64>,
}

impl KilledGenerator {
    pub fn from_rates(rates: &RateVector) -> Self {
        Self { birth: rates.lambda.clone(), death: rates.mu_rates.clone() }
    }

    pub fn capacity(&self) -> usize {
        self.birth.len() - 1
    }

    /// Superdiagonal entry `(k, k+1)`.
    #[inline]
    pub fn birth(&self, state: usize) -> f64 {
        self.birth[state]
    }

    /// Subdiagonal entry `(k, k-1)`; for `k = 1` this is the removed flow to 0.
    #[inline]
    pub fn death(&self, state: usize) -> f64 {
        self.death[state]
    }

    #[inline]
    pub fn diag(&self, state: usize) -> f64 {
        -(self.birth[state] + self.death[state])
    }

    /// Absorption rate `mu_1` retained as killing on the diagonal.
    pub fn killing_rate(&self) -> f64 {
        self.death[1]
    }

    /// Largest total exit rate `max_k (lambda_k + mu_k)`.
    pub fn max_exit_rate(&self) -> f64 {
        (1..=self.capacity()).map(|k| -self.diag(k)).fold(0.0, f64::max)
    }

    pub fn norm_inf(&self) -> f64 {
        let n = self.capacity();
        (1..=n)
            .map(|k| {
                let up = if k < n { self.birth[k] } else { 0.0 };
                let down = if k > 1 { self.death[k] } else { 0.0 };
                up + down - self.diag(k)
            })
            .fold(0.0, f64::max)
    }

    pub fn row_sum(&self, state: usize) -> f64 {
        let n = self.capacity();
        let up = if state < n { self.birth[state] } else { 0.0 };
        let down = if state > 1 { self.death[state] } else { 0.0 };
        up + down + self.diag(state)
    }

    /// Dense `N x N` matrix with row/column `k - 1` for state `k`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.capacity();
        DMatrix::from_fn(n, n, |i, j| {
            let k = i + 1;
            if i == j {
                self.diag(k)
            } else if j == i + 1 {
                self.birth[k]
            } else if j + 1 == i {
                self.death[k]
            } else {
                0.0
            }
        })
    }

    /// `y = Q+ x` for `x` indexed by state (entry 0 ignored).
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.capacity();
        let mut y = vec![0.0; n + 1];
        for k in 1..=n {
            let mut acc = self.diag(k) * x[k];
            if k < n {
                acc += self.birth[k] * x[k + 1];
            }
            if k > 1 {
                acc += self.death[k] * x[k - 1];
            }
            y[k] = acc;
        }
        y
    }

    /// `y = x^T Q+`.
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        let n = self.capacity();
        let mut y = vec![0.0; n + 1];
        for k in 1..=n {
            let mut acc = self.diag(k) * x[k];
            if k > 1 {
                acc += self.birth[k - 1] * x[k - 1];
            }
            if k < n {
                acc += self.death[k + 1] * x[k + 1];
            }
            y[k] = acc;
        }
        y
    }

    /// LU pivots `p_1..p_N` of `Q+ - x I` (index 0 unused).
    fn pivots(&self, x: f64) -> Vec<f64> {
        let n = self.capacity();
        let floor = f64::EPSILON * self.norm_inf().max(f64::MIN_POSITIVE);
        let mut p = vec![0.0; n + 1];
        p[1] = self.diag(1) - x;
        for k in 2..=n {
            let mut prev = p[k - 1];
            if prev == 0.0 {
                prev = -floor;
            }
            p[k] = self.diag(k) - x - self.birth[k - 1] * self.death[k] / prev;
        }
        p
    }

    /// Bottom-up pivots `q_1..q_N` of `Q+ - x I` (index 0 unused).
    fn back_pivots(&self, x: f64) -> Vec<f64> {
        let n = self.capacity();
        let floor = f64::EPSILON * self.norm_inf().max(f64::MIN_POSITIVE);
        let mut q = vec![0.0; n + 1];
        q[n] = self.diag(n) - x;
        for k in (1..n).rev() {
            let mut next = q[k + 1];
            if next == 0.0 {
                next = -floor;
            }
            q[k] = self.diag(k) - x - self.birth[k] * self.death[k + 1] / next;
        }
        q
    }

    /// Number of eigenvalues strictly below `x` (Sturm count).
    fn count_below(&self, x: f64) -> usize {
        self.pivots(x).iter().skip(1).filter(|p| **p < 0.0).count()
    }

    /// The `j`-th smallest eigenvalue (1-based) by bisection.
    fn eigenvalue(&self, j: usize) -> Result<f64> {
        let scale = self.norm_inf().max(f64::MIN_POSITIVE);
        let mut lo = -scale - 1.0;
        let mut hi = 0.0;
        if self.count_below(hi) < j {
            hi = scale * 1e-10;
            if self.count_below(hi) < j {
                return Err(BdpError::SpectralDegeneracy("eigenvalue bracket failed: nonnegative spectrum".into()));
            }
        }
        if self.count_below(lo) >= j {
            return Err(BdpError::SpectralDegeneracy("eigenvalue bracket failed below".into()));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.count_below(mid) >= j {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 2.0 * f64::EPSILON * scale {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Assembles `Q+(theta)` after checking admissibility.
pub fn build_killed_generator(spec: &StructuralFunctions, theta: &ParamVector) -> Result<KilledGenerator> {
    validate_admissible(spec, theta).into_result()?;
    Ok(KilledGenerator::from_rates(&RateVector::new(spec, theta)?))
}

/// Principal eigendata of the killed generator.
///
/// Gauge: `h(1) = 1` and `v^T h = 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralData {
    pub gamma: f64,
    /// Second largest eigenvalue.
    pub second: f64,
    /// `gamma - second`.
    pub gap: f64,
    pub h: Vec<f64>,
    pub v: Vec<f64>,
    pub pi_tilde: Vec<f64>,
    /// `sum_k v(k)`: `P_x(tau_0 > s) ~ c_theta h(x) exp(gamma s)`.
    pub c_theta: f64,
    #[serde(skip)]
    factors: TwistedFactors,
}

/// Twisted factorization of `Q+ - gamma I` and the tilted rates read off it.
#[derive(Debug, Clone, PartialEq, Default)]
struct TwistedFactors {
    fwd: Vec<f64>,
    bwd: Vec<f64>,
    twist: usize,
    lambda_tilde: Vec<f64>,
    mu_tilde: Vec<f64>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

struct EigenRatios {
    factors: TwistedFactors,
    log_h: Vec<f64>,
    log_v: Vec<f64>,
}

fn eigen_ratios(g: &KilledGenerator, gamma: f64) -> Result<EigenRatios> {
    let n = g.capacity();
    let p = g.pivots(gamma);
    let q = g.back_pivots(gamma);
    // Twist where the two factorizations agree best (smallest |gamma_r|).
    let twist = (1..=n)
        .min_by(|&a, &b| {
            let ga = (p[a] + q[a] - (g.diag(a) - gamma)).abs();
            let gb = (p[b] + q[b] - (g.diag(b) - gamma)).abs();
            ga.total_cmp(&gb)
        })
        .unwrap_or(1);
    let mut lambda_tilde = vec![0.0; n + 1];
    let mut mu_tilde = vec![0.0; n + 1];
    let mut log_h = vec![0.0; n + 1];
    let mut log_v = vec![0.0; n + 1];
    for k in 1..n {
        let (lt, mt) = if k < twist {
            (-p[k], -g.death(k + 1) * g.birth(k) / p[k])
        } else {
            (-g.birth(k) * g.death(k + 1) / q[k + 1], -q[k + 1])
        };
        if !(lt > 0.0 && mt > 0.0 && lt.is_finite() && mt.is_finite()) {
            return Err(BdpError::SpectralDegeneracy(format!(
                "nonpositive eigenvector ratio at state {k} (pivots {}, {})",
                p[k],
                q[k + 1]
            )));
        }
        lambda_tilde[k] = lt;
        mu_tilde[k + 1] = mt;
        let log_r = lt.ln() - g.birth(k).ln();
        log_h[k + 1] = log_h[k] + log_r;
        log_v[k + 1] = log_v[k] + log_r + g.birth(k).ln() - g.death(k + 1).ln();
    }
    // v^T h = 1 with h(1) = 1.
    let shift = log_sum_exp((1..=n).map(|k| log_h[k] + log_v[k]));
    for lv in log_v.iter_mut().skip(1) {
        *lv -= shift;
    }
    Ok(EigenRatios { factors: TwistedFactors { fwd: p, bwd: q, twist, lambda_tilde, mu_tilde }, log_h, log_v })
}

/// Principal eigenvalue, right/left eigenvectors and quasi-stationary law.
pub fn principal_eigen(g: &KilledGenerator) -> Result<SpectralData> {
    let n = g.capacity();
    if n < 2 {
        return Err(BdpError::Argument("killed generator needs N >= 2".into()));
    }
    for k in 1..n {
        if !(g.birth(k) > 0.0 && g.death(k + 1) > 0.0) {
            return Err(BdpError::SpectralDegeneracy(format!("killed chain reducible at state {k}")));
        }
    }
    if !(g.killing_rate() > 0.0) {
        return Err(BdpError::SpectralDegeneracy("no killing at state 1".into()));
    }

    let bisected = g.eigenvalue(n)?;
    let second = g.eigenvalue(n - 1)?;

    // Summing the left eigen-equation over columns gives
    // gamma * sum(v) = -mu_1 v(1), which pins gamma to full relative
    // precision even when it is far below the bisection resolution.
    let first = eigen_ratios(g, bisected)?;
    let log_mass = log_sum_exp((1..=n).map(|k| first.log_v[k]));
    let mut gamma = -g.killing_rate() * (first.log_v[1] - log_mass).exp();
    if gamma == 0.0 {
        gamma = -f64::MIN_POSITIVE;
    }
    let tolerance = 1e-8 * g.norm_inf();
    if (gamma - bisected).abs() > tolerance {
        return Err(BdpError::SpectralDegeneracy(format!(
            "principal eigenvalue refinement disagrees with bisection ({gamma} vs {bisected})"
        )));
    }
    let ratios = eigen_ratios(g, gamma)?;

    let gap = gamma - second;
    if !(gap >= MIN_GAP) {
        return Err(BdpError::SpectralDegeneracy(format!("spectral gap {gap:e} below {MIN_GAP:e}")));
    }

    let mut h = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut pi_tilde = vec![0.0; n + 1];
    for k in 1..=n {
        h[k] = ratios.log_h[k].exp();
        v[k] = ratios.log_v[k].exp();
        pi_tilde[k] = (ratios.log_h[k] + ratios.log_v[k]).exp();
    }
    if h.iter().skip(1).any(|x| !x.is_finite() || *x <= 0.0) || v.iter().skip(1).any(|x| !x.is_finite()) {
        return Err(BdpError::SpectralDegeneracy("eigenvector entries overflow the floating-point range".into()));
    }
    let mass: f64 = pi_tilde.iter().sum();
    for p in pi_tilde.iter_mut() {
        *p /= mass;
    }
    let c_theta = v.iter().sum();
    Ok(SpectralData { gamma, second, gap, h, v, pi_tilde, c_theta, factors: ratios.factors })
}

/// Tilt factors and tilted rates of the Q-process.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QProcessRates {
    /// `h(k+1)/h(k)` for `k = 1..N-1`.
    pub r_plus: Vec<f64>,
    /// `h(k-1)/h(k)` for `k = 2..N`.
    pub r_minus: Vec<f64>,
    /// `lambda_k R+(k)` for `k = 1..N-1`.
    pub lambda_tilde: Vec<f64>,
    /// `mu r(k) R-(k)` for `k = 2..N`; exactly zero at `k = 1`.
    pub mu_tilde: Vec<f64>,
}

impl QProcessRates {
    /// Row sums of the tilted generator `H^-1 (Q+ - gamma I) H` (all zero in exact arithmetic).
    pub fn generator_row_sums(&self, g: &KilledGenerator, s: &SpectralData) -> Vec<f64> {
        (1..=g.capacity())
            .map(|k| self.lambda_tilde[k] + self.mu_tilde[k] + g.diag(k) - s.gamma)
            .collect()
    }
}

/// Doob h-transform of the killed chain.
pub fn doob_transform(g: &KilledGenerator, s: &SpectralData) -> QProcessRates {
    let n = g.capacity();
    let mut r_plus = vec![0.0; n + 1];
    let mut r_minus = vec![0.0; n + 1];
    let mut lambda_tilde = vec![0.0; n + 1];
    let mut mu_tilde = vec![0.0; n + 1];
    for k in 1..n {
        lambda_tilde[k] = s.factors.lambda_tilde[k];
        mu_tilde[k + 1] = s.factors.mu_tilde[k + 1];
        r_plus[k] = lambda_tilde[k] / g.birth(k);
        r_minus[k + 1] = mu_tilde[k + 1] / g.death(k + 1);
    }
    QProcessRates { r_plus, r_minus, lambda_tilde, mu_tilde }
}

/// Derivatives of the principal eigendata with respect to `theta = (beta, mu)`.
///
/// `dh` uses the gauge `v^T dh = 0`; only gauge-invariant quantities
/// (`dgamma`, `dlog_r_plus`, `dlog_r_minus`) enter the likelihood scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralSensitivities {
    pub dgamma: Vec<f64>,
    pub dh: Vec<Vec<f64>>,
    pub dlog_r_plus: Vec<Vec<f64>>,
    pub dlog_r_minus: Vec<Vec<f64>>,
}

/// First-order sensitivities of `gamma`, `h` and the tilt factors.
///
/// `dgamma_a = v^T (dQ+/dtheta_a) h`, and the eigenvector derivative is the
/// solution of the bordered system `(Q+ - gamma I) x = dgamma_a h - dQ_a h`,
/// `v^T x = 0`, obtained here by differentiating the LU pivots of
/// `Q+ - gamma I` (the same factorization that produced `h`).
pub fn eigen_sensitivities(
    spec: &StructuralFunctions,
    theta: &ParamVector,
    g: &KilledGenerator,
    s: &SpectralData,
) -> Result<SpectralSensitivities> {
    let n = g.capacity();
    let dim = spec.dim();
    let kmech = spec.mechanisms();
    if theta.dim() != dim || g.capacity() != spec.capacity() {
        return Err(BdpError::Argument("parameter, model and generator dimensions disagree".into()));
    }
    let rates = doob_transform(g, s);

    let mut dgamma = vec![0.0; dim];
    let mut dh = vec![vec![0.0; n + 1]; dim];
    let mut dlog_r_plus = vec![vec![0.0; n + 1]; dim];
    let mut dlog_r_minus = vec![vec![0.0; n + 1]; dim];

    for a in 0..dim {
        let is_mu = a == kmech;
        // dQ entries: superdiagonal, subdiagonal, diagonal.
        let d_birth = |k: usize| if is_mu || k >= n { 0.0 } else { spec.f(a, k) };
        let d_death = |k: usize| if is_mu { spec.r(k) } else { 0.0 };

        // dgamma = sum_k pi~(k) (dQ h)_k / h(k)
        let mut dg = 0.0;
        for k in 1..=n {
            let up = if k < n { d_birth(k) * (rates.r_plus[k] - 1.0) } else { 0.0 };
            let down = d_death(k) * (if k > 1 { rates.r_minus[k] } else { 0.0 } - 1.0);
            dg += s.pi_tilde[k] * (up + down);
        }
        dgamma[a] = dg;

        // Differentiate each factorization in its own stable direction.
        let (p, q, twist) = (&s.factors.fwd, &s.factors.bwd, s.factors.twist);
        let mut dp_prev = 0.0;
        for k in 1..twist.min(n) {
            let da = -(d_birth(k) + d_death(k));
            let dp = if k == 1 {
                da - dg
            } else {
                let prod = g.birth(k - 1) * g.death(k);
                let dprod = d_birth(k - 1) * g.death(k) + g.birth(k - 1) * d_death(k);
                da - dg - (dprod * p[k - 1] - prod * dp_prev) / (p[k - 1] * p[k - 1])
            };
            dlog_r_plus[a][k] = dp / p[k] - d_birth(k) / g.birth(k);
            dp_prev = dp;
        }
        let mut dq_next = 0.0;
        for k in (twist + 1..=n).rev() {
            let da = -(d_birth(k) + d_death(k));
            let dq = if k == n {
                da - dg
            } else {
                let prod = g.birth(k) * g.death(k + 1);
                let dprod = d_birth(k) * g.death(k + 1) + g.birth(k) * d_death(k + 1);
                da - dg - (dprod * q[k + 1] - prod * dq_next) / (q[k + 1] * q[k + 1])
            };
            // R+(k-1) = -mu_k / q_k
            dlog_r_plus[a][k - 1] = d_death(k) / g.death(k) - dq / q[k];
            dq_next = dq;
        }
        for k in 1..n {
            dlog_r_minus[a][k + 1] = -dlog_r_plus[a][k];
        }

        let mut dlog_h = vec![0.0; n + 1];
        for k in 1..n {
            dlog_h[k + 1] = dlog_h[k] + dlog_r_plus[a][k];
        }
        let offset: f64 = (1..=n).map(|k| s.pi_tilde[k] * dlog_h[k]).sum();
        for k in 1..=n {
            dh[a][k] = s.h[k] * (dlog_h[k] - offset);
        }
    }
    if dgamma.iter().chain(dlog_r_plus.iter().flatten()).any(|x| !x.is_finite()) {
        return Err(BdpError::SpectralDegeneracy("non-finite eigen-sensitivity".into()));
    }
    Ok(SpectralSensitivities { dgamma, dh, dlog_r_plus, dlog_r_minus })
}

/// Poisson(`rate`) weights from 0 until the tail drops below the truncation mass.
fn poisson_weights(rate: f64) -> Vec<f64> {
    let mut weights = vec![(-rate).exp()];
    let mut cum = weights[0];
    let mut n = 0usize;
    while 1.0 - cum > UNIFORMIZATION_TAIL && n < 100_000 {
        n += 1;
        let w = weights[n - 1] * rate / n as f64;
        weights.push(w);
        cum += w;
        if w == 0.0 && n as f64 > rate {
            break;
        }
    }
    weights
}

/// `exp(s Q+) 1` for every starting state, by uniformization.
///
/// Entry `x` is `P_x(tau_0 > s)`. Long horizons are split into `2^m` equal
/// pieces whose transition matrix is squared `m` times (at most 64 halvings).
pub fn survival_vector(g: &KilledGenerator, s: f64) -> Result<Vec<f64>> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(BdpError::Argument(format!("survival horizon must be finite and nonnegative, got {s}")));
    }
    let n = g.capacity();
    let mut out = vec![1.0; n + 1];
    out[0] = 0.0;
    if s == 0.0 {
        return Ok(out);
    }
    let rate = g.max_exit_rate();
    if rate == 0.0 {
        return Ok(out);
    }
    let step = |x: &[f64]| -> Vec<f64> {
        // (I + Q/rate) x
        let qx = g.apply(x);
        x.iter().zip(&qx).map(|(a, b)| a + b / rate).collect()
    };

    if rate * s <= DIRECT_UNIFORMIZATION_LIMIT {
        let weights = poisson_weights(rate * s);
        let mut power = out.clone();
        let mut acc = vec![0.0; n + 1];
        for (i, w) in weights.iter().enumerate() {
            if i > 0 {
                power = step(&power);
            }
            for k in 1..=n {
                acc[k] += w * power[k];
            }
        }
        return Ok(acc);
    }

    let halvings = ((rate * s / (DIRECT_UNIFORMIZATION_LIMIT / 2.0)).log2().ceil() as u32).clamp(1, MAX_HALVINGS);
    let delta = s / 2f64.powi(halvings as i32);
    let uniform = DMatrix::<f64>::identity(n, n) + g.to_dense() / rate;
    let weights = poisson_weights(rate * delta);
    let mut power = DMatrix::<f64>::identity(n, n);
    let mut transition = power.clone() * weights[0];
    for w in weights.iter().skip(1) {
        power = &power * &uniform;
        transition += &power * *w;
    }
    for _ in 0..halvings {
        transition = &transition * &transition;
    }
    for k in 1..=n {
        out[k] = transition.row(k - 1).sum();
    }
    Ok(out)
}

/// `P_x(tau_0 > s)` for the original (killed) chain.
pub fn survival_probability(g: &KilledGenerator, x: usize, s: f64) -> Result<f64> {
    if x == 0 || x > g.capacity() {
        return Err(BdpError::Argument(format!("state {x} outside 1..={}", g.capacity())));
    }
    Ok(survival_vector(g, s)?[x])
}

/// JSON-ready snapshot of the spectral quantities used by the diagnostics command.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralDump {
    pub gamma: f64,
    pub gap: f64,
    pub c_theta: f64,
    pub h: Vec<f64>,
    pub v: Vec<f64>,
    pub pi_tilde: Vec<f64>,
    pub r_plus: Vec<f64>,
    pub r_minus: Vec<f64>,
    pub lambda_tilde: Vec<f64>,
    pub mu_tilde: Vec<f64>,
}

impl SpectralDump {
    pub fn new(s: &SpectralData, q: &QProcessRates) -> Self {
        Self {
            gamma: s.gamma,
            gap: s.gap,
            c_theta: s.c_theta,
            h: s.h.clone(),
            v: s.v.clone(),
            pi_tilde: s.pi_tilde.clone(),
            r_plus: q.r_plus.clone(),
            r_minus: q.r_minus.clone(),
            lambda_tilde: q.lambda_tilde.clone(),
            mu_tilde: q.mu_tilde.clone(),
        }
    }
}

/// Spectral data, tilted rates and (optionally) sensitivities at one parameter value.
#[derive(Debug, Clone)]
pub struct SpectralSnapshot {
    pub rates: RateVector,
    pub generator: KilledGenerator,
    pub spectral: SpectralData,
    pub tilted: QProcessRates,
    pub sensitivities: Option<SpectralSensitivities>,
}

impl SpectralSnapshot {
    pub fn new(spec: &StructuralFunctions, theta: &ParamVector, with_sensitivities: bool) -> Result<Self> {
        let generator = build_killed_generator(spec, theta)?;
        let spectral = principal_eigen(&generator)?;
        let tilted = doob_transform(&generator, &spectral);
        let sensitivities = if with_sensitivities {
            Some(eigen_sensitivities(spec, theta, &generator, &spectral)?)
        } else {
            None
        };
        let rates = RateVector::new(spec, theta)?;
        Ok(Self { rates, generator, spectral, tilted, sensitivities })
    }

    pub fn sensitivities(&self) -> &SpectralSensitivities {
        self.sensitivities.as_ref().expect("snapshot built without sensitivities")
    }
}
