//! Composite birth-death model: structural functions, parameters and rates.
//!
//! States are `0..=N` with `0` absorbing. The birth rate from state `k` is the
//! additive mixture `lambda_k = sum_i beta_i * f_i(k)` and the death rate is
//! `mu * r(k)`. All tables are indexed by state, so `f[i][k]` is `f_i(k)`.

use serde::{Deserialize, Serialize};

use crate::error::{BdpError, Result};

/// Largest value of `max_k C(k, K) * N` accepted for the SIS family.
const SIS_OVERFLOW_GUARD: f64 = 1e15;

/// Tabulated structural functions `f_i`, `r` of a composite birth-death model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralFunctions {
    capacity: usize,
    f: Vec<Vec<f64>>,
    r: Vec<f64>,
}

impl StructuralFunctions {
    /// Builds a model from explicit tables, checking boundary zeros and positivity.
    pub fn new(f: Vec<Vec<f64>>, r: Vec<f64>) -> Result<Self> {
        if r.len() < 3 {
            return Err(BdpError::Argument(format!(
                "r must cover states 0..=N with N >= 2, got {} entries",
                r.len()
            )));
        }
        let capacity = r.len() - 1;
        if f.is_empty() {
            return Err(BdpError::Argument("at least one birth mechanism is required".into()));
        }
        for (i, row) in f.iter().enumerate() {
            if row.len() != capacity + 1 {
                return Err(BdpError::Argument(format!(
                    "f_{} has {} entries, expected {}",
                    i + 1,
                    row.len(),
                    capacity + 1
                )));
            }
            if let Some((k, x)) = row.iter().enumerate().find(|(_, x)| !x.is_finite() || **x < 0.0) {
                return Err(BdpError::Argument(format!("f_{}({k}) = {x} is not a finite nonnegative value", i + 1)));
            }
            if row[0] != 0.0 || row[capacity] != 0.0 {
                return Err(BdpError::Argument(format!("f_{} must vanish at 0 and N", i + 1)));
            }
        }
        if r[0] != 0.0 {
            return Err(BdpError::Argument("r(0) must be 0".into()));
        }
        if let Some((k, x)) = r.iter().enumerate().skip(1).find(|(_, x)| !x.is_finite() || **x <= 0.0) {
            return Err(BdpError::Argument(format!("r({k}) = {x} must be finite and positive")));
        }
        Ok(Self { capacity, f, r })
    }

    /// Simplicial SIS on the complete hypergraph: `f_i(k) = C(k, i) (N - k)`, `r(k) = k`.
    pub fn sis(capacity: usize, mechanisms: usize) -> Result<Self> {
        if capacity < 2 {
            return Err(BdpError::Argument(format!("N must be at least 2, got {capacity}")));
        }
        if mechanisms == 0 || mechanisms > capacity - 1 {
            return Err(BdpError::Argument(format!(
                "K must lie in 1..=N-1 = 1..={}, got {mechanisms}",
                capacity - 1
            )));
        }
        // Pascal's triangle in f64; exact while the guard below holds.
        let mut binom = vec![vec![0.0_f64; mechanisms + 1]; capacity + 1];
        for k in 0..=capacity {
            binom[k][0] = 1.0;
            for i in 1..=mechanisms.min(k) {
                binom[k][i] = binom[k - 1][i - 1] + if i < k { binom[k - 1][i] } else { 0.0 };
            }
        }
        let largest = binom.iter().map(|row| row[mechanisms]).fold(0.0, f64::max) * capacity as f64;
        if largest > SIS_OVERFLOW_GUARD {
            return Err(BdpError::Argument(format!(
                "K = {mechanisms} with N = {capacity} gives structural values up to {largest:e}, above {SIS_OVERFLOW_GUARD:e}"
            )));
        }
        let f = (1..=mechanisms)
            .map(|i| (0..=capacity).map(|k| binom[k][i] * (capacity - k) as f64).collect())
            .collect();
        let r = (0..=capacity).map(|k| k as f64).collect();
        Self::new(f, r)
    }

    /// Capacity `N`.
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of birth mechanisms `K`.
    pub fn mechanisms(&self) -> usize {
        self.f.len()
    }

    /// Parameter dimension `K + 1`.
    pub fn dim(&self) -> usize {
        self.f.len() + 1
    }

    /// `f_i(k)` with a zero-based mechanism index.
    #[inline]
    pub fn f(&self, mechanism: usize, state: usize) -> f64 {
        self.f[mechanism][state]
    }

    pub fn f_table(&self) -> &[Vec<f64>] {
        &self.f
    }

    #[inline]
    pub fn r(&self, state: usize) -> f64 {
        self.r[state]
    }

    pub fn r_table(&self) -> &[f64] {
        &self.r
    }

    fn check_state(&self, state: usize) -> Result<()> {
        if state > self.capacity {
            Err(BdpError::Argument(format!("state {state} outside 0..={}", self.capacity)))
        } else {
            Ok(())
        }
    }

    fn check_theta(&self, theta: &ParamVector) -> Result<()> {
        if theta.beta.len() != self.mechanisms() {
            return Err(BdpError::Argument(format!(
                "theta has {} birth coefficients, model has {} mechanisms",
                theta.beta.len(),
                self.mechanisms()
            )));
        }
        Ok(())
    }

    /// Total birth rate `lambda_k(beta)` without range checks.
    #[inline]
    pub(crate) fn lambda(&self, beta: &[f64], state: usize) -> f64 {
        self.f.iter().zip(beta).map(|(row, b)| b * row[state]).sum()
    }
}

/// Which parameter region a [`ParamVector`] is meant to live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ParamSpace {
    /// All coordinates strictly positive.
    #[default]
    Estimation,
    /// Coordinate `beta_i` (zero-based) may take either sign; every birth rate on
    /// the transient states must stay positive.
    Test(usize),
}

/// `theta = (beta_1, ..., beta_K, mu)` together with its admissibility region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub beta: Vec<f64>,
    pub mu: f64,
    #[serde(default)]
    pub space: ParamSpace,
}

impl ParamVector {
    pub fn new(beta: Vec<f64>, mu: f64) -> Self {
        Self { beta, mu, space: ParamSpace::Estimation }
    }

    pub fn with_space(mut self, space: ParamSpace) -> Self {
        self.space = space;
        self
    }

    pub fn dim(&self) -> usize {
        self.beta.len() + 1
    }

    /// Coordinates as a flat vector `(beta_1, ..., beta_K, mu)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = self.beta.clone();
        out.push(self.mu);
        out
    }

    /// Rebuilds a parameter vector from flat coordinates, keeping the space flag.
    pub fn from_slice(coords: &[f64], space: ParamSpace) -> Self {
        let (mu, beta) = coords.split_last().expect("parameter vector cannot be empty");
        Self { beta: beta.to_vec(), mu: *mu, space }
    }

    #[inline]
    pub fn get(&self, a: usize) -> f64 {
        if a < self.beta.len() {
            self.beta[a]
        } else {
            self.mu
        }
    }

    pub fn set(&mut self, a: usize, value: f64) {
        if a < self.beta.len() {
            self.beta[a] = value;
        } else {
            self.mu = value;
        }
    }
}

/// Birth and death rate tables over states `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateVector {
    pub lambda: Vec<f64>,
    pub mu_rates: Vec<f64>,
}

impl RateVector {
    pub fn new(spec: &StructuralFunctions, theta: &ParamVector) -> Result<Self> {
        spec.check_theta(theta)?;
        let n = spec.capacity();
        let lambda = (0..=n).map(|k| spec.lambda(&theta.beta, k)).collect();
        let mu_rates = (0..=n).map(|k| theta.mu * spec.r(k)).collect();
        Ok(Self { lambda, mu_rates })
    }

    pub fn capacity(&self) -> usize {
        self.lambda.len() - 1
    }
}

/// `lambda_k(beta) = sum_i beta_i f_i(k)`.
pub fn birth_rate(spec: &StructuralFunctions, theta: &ParamVector, state: usize) -> Result<f64> {
    spec.check_state(state)?;
    spec.check_theta(theta)?;
    Ok(spec.lambda(&theta.beta, state))
}

/// `mu * r(k)`.
pub fn death_rate(spec: &StructuralFunctions, theta: &ParamVector, state: usize) -> Result<f64> {
    spec.check_state(state)?;
    spec.check_theta(theta)?;
    Ok(theta.mu * spec.r(state))
}

/// A single reason why a parameter fails admissibility.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// `lambda_k <= 0` on a transient state `1 <= k <= N-1`.
    BirthRate { state: usize, value: f64 },
    /// `mu r(k) <= 0` for `2 <= k <= N`.
    DeathRate { state: usize, value: f64 },
    /// A coordinate outside its declared region (zero-based, `K` denotes `mu`).
    Coordinate { index: usize, value: f64 },
    /// Wrong number of coordinates or a non-finite value.
    Malformed { reason: String },
}

/// Outcome of [`validate_admissible`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    /// The killed chain on `1..=N` is irreducible.
    pub irreducible: bool,
    /// Theta lies in its declared parameter space.
    pub in_space: bool,
    pub violations: Vec<Violation>,
}

impl AdmissibilityReport {
    pub fn is_admissible(&self) -> bool {
        self.irreducible && self.in_space
    }

    /// Converts a failing report into an [`BdpError::Inadmissible`].
    pub fn into_result(self) -> Result<()> {
        if self.is_admissible() {
            Ok(())
        } else {
            Err(BdpError::Inadmissible(format!("{:?}", self.violations)))
        }
    }
}

/// Checks irreducibility of the killed chain and membership of the declared space.
pub fn validate_admissible(spec: &StructuralFunctions, theta: &ParamVector) -> AdmissibilityReport {
    let mut violations = Vec::new();
    if theta.beta.len() != spec.mechanisms() {
        violations.push(Violation::Malformed {
            reason: format!("expected {} birth coefficients, got {}", spec.mechanisms(), theta.beta.len()),
        });
        return AdmissibilityReport { irreducible: false, in_space: false, violations };
    }
    if theta.to_vec().iter().any(|x| !x.is_finite()) {
        violations.push(Violation::Malformed { reason: "non-finite coordinate".into() });
        return AdmissibilityReport { irreducible: false, in_space: false, violations };
    }

    let n = spec.capacity();
    let mut irreducible = true;
    for k in 1..n {
        let value = spec.lambda(&theta.beta, k);
        if !(value > 0.0) {
            irreducible = false;
            violations.push(Violation::BirthRate { state: k, value });
        }
    }
    for k in 2..=n {
        let value = theta.mu * spec.r(k);
        if !(value > 0.0) {
            irreducible = false;
            violations.push(Violation::DeathRate { state: k, value });
        }
    }

    let mut in_space = true;
    for a in 0..theta.dim() {
        let free = matches!(theta.space, ParamSpace::Test(i) if i == a);
        let value = theta.get(a);
        if !free && !(value > 0.0) {
            in_space = false;
            violations.push(Violation::Coordinate { index: a, value });
        }
    }
    if let ParamSpace::Test(i) = theta.space {
        if i >= spec.mechanisms() {
            in_space = false;
            violations.push(Violation::Malformed { reason: format!("test coordinate {i} is not a birth mechanism") });
        }
    }
    AdmissibilityReport { irreducible, in_space, violations }
}

/// Model family tag in a model file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Sis,
    Custom,
}

/// Parameter block of a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaFile {
    pub beta: Vec<f64>,
    pub mu: f64,
}

/// JSON model specification file.
///
/// ```json
/// {"N": 100, "K": 2, "family": "sis", "theta": {"beta": [0.0101, 0.00037], "mu": 1.0}}
/// ```
///
/// For `"custom"` the tables `f` (K rows of N+1 values) and `r` (N+1 values) are required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<f64>>,
    pub theta: ThetaFile,
}

impl ModelFile {
    pub fn structural(&self) -> Result<StructuralFunctions> {
        let spec = match self.family {
            Family::Sis => StructuralFunctions::sis(self.n, self.k)?,
            Family::Custom => {
                let (Some(f), Some(r)) = (&self.f, &self.r) else {
                    return Err(BdpError::Argument("custom family requires explicit f and r tables".into()));
                };
                StructuralFunctions::new(f.clone(), r.clone())?
            }
        };
        if spec.capacity() != self.n || spec.mechanisms() != self.k {
            return Err(BdpError::Argument(format!(
                "declared N = {}, K = {} but tables give N = {}, K = {}",
                self.n,
                self.k,
                spec.capacity(),
                spec.mechanisms()
            )));
        }
        Ok(spec)
    }

    pub fn theta(&self) -> ParamVector {
        ParamVector::new(self.theta.beta.clone(), self.theta.mu)
    }
}
