//! Exact (Gillespie) simulation of the absorbing chain, survival-conditioned
//! sampling by rejection, and direct simulation of the Q-process.

use serde::{Deserialize, Serialize};

use crate::error::{BdpError, Result};
use crate::model::{validate_admissible, ParamVector, RateVector, StructuralFunctions};
use crate::rng::{RngStream, StreamRng};
use crate::spectral::SpectralSnapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Birth,
    Death,
}

/// One jump of the observed path. `mark` is the zero-based birth mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub direction: Direction,
    pub mark: Option<usize>,
}

/// A continuously observed path on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub capacity: usize,
    pub x0: usize,
    pub horizon: f64,
    pub events: Vec<Event>,
    pub absorbed_at: Option<f64>,
    /// Birth events carry their mechanism.
    #[serde(default)]
    pub marked: bool,
}

impl Trajectory {
    pub fn is_marked(&self) -> bool {
        self.marked
    }

    pub fn survived(&self) -> bool {
        self.absorbed_at.is_none()
    }

    /// State after every event, in event order.
    pub fn states_after(&self) -> impl Iterator<Item = usize> + '_ {
        self.events.iter().scan(self.x0, |x, e| {
            match e.direction {
                Direction::Birth => *x += 1,
                Direction::Death => *x -= 1,
            }
            Some(*x)
        })
    }

    pub fn final_state(&self) -> usize {
        self.states_after().last().unwrap_or(self.x0)
    }

    /// Right-continuous path value `X_t`.
    pub fn state_at(&self, t: f64) -> Result<usize> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(BdpError::Argument(format!("time {t} outside [0, {}]", self.horizon)));
        }
        let jumps = self.events.partition_point(|e| e.t <= t);
        match jumps {
            0 => Ok(self.x0),
            j => Ok(self.states_after().nth(j - 1).expect("jump index within the event list")),
        }
    }

    /// Path restricted to `[0, t]`.
    pub fn truncate(&self, t: f64) -> Trajectory {
        let keep = self.events.partition_point(|e| e.t <= t);
        Trajectory {
            capacity: self.capacity,
            x0: self.x0,
            horizon: t,
            events: self.events[..keep].to_vec(),
            absorbed_at: self.absorbed_at.filter(|a| *a <= t),
            marked: self.marked,
        }
    }

    /// Drops mechanism marks.
    pub fn unmarked(&self) -> Trajectory {
        let mut out = self.clone();
        out.marked = false;
        for e in &mut out.events {
            e.mark = None;
        }
        out
    }

    /// Checks ordering, state bounds and absorption consistency.
    pub fn validate(&self) -> Result<()> {
        if self.x0 > self.capacity {
            return Err(BdpError::Argument(format!("x0 = {} exceeds N = {}", self.x0, self.capacity)));
        }
        let mut x = self.x0;
        let mut last = 0.0;
        for (i, e) in self.events.iter().enumerate() {
            if !(e.t > last && e.t <= self.horizon) {
                return Err(BdpError::Argument(format!("event {i} at t = {} is out of order", e.t)));
            }
            if x == 0 {
                return Err(BdpError::Argument(format!("event {i} occurs after absorption")));
            }
            match e.direction {
                Direction::Birth if x == self.capacity => {
                    return Err(BdpError::Argument(format!("birth from N at event {i}")))
                }
                Direction::Birth => x += 1,
                Direction::Death => x -= 1,
            }
            let mark_ok = match (e.direction, e.mark) {
                (Direction::Birth, Some(_)) => self.marked,
                (Direction::Birth, None) => !self.marked,
                (Direction::Death, mark) => mark.is_none(),
            };
            if !mark_ok {
                return Err(BdpError::Argument(format!("event {i} has an inconsistent mechanism mark")));
            }
            last = e.t;
        }
        match (x == 0, self.absorbed_at) {
            (true, Some(a)) if self.events.is_empty() || a == last => Ok(()),
            (false, None) => Ok(()),
            _ => Err(BdpError::Argument("absorption time inconsistent with the path".into())),
        }
    }
}

/// Per-state jump rates and cumulative mechanism weights for a Gillespie run.
#[derive(Debug, Clone)]
pub struct Simulator {
    capacity: usize,
    up: Vec<f64>,
    down: Vec<f64>,
    /// `mark_cum[k][i] = sum_{j <= i} beta_j f_j(k)`, scaled to the birth rate in use.
    mark_cum: Vec<Vec<f64>>,
}

impl Simulator {
    /// Simulator for the original absorbing chain.
    pub fn original(spec: &StructuralFunctions, theta: &ParamVector) -> Result<Self> {
        validate_admissible(spec, theta).into_result()?;
        let rates = RateVector::new(spec, theta)?;
        Ok(Self::from_tables(spec, theta, rates.lambda, rates.mu_rates))
    }

    /// Simulator for the Q-process (tilted rates, no absorption).
    pub fn q_process(spec: &StructuralFunctions, theta: &ParamVector) -> Result<Self> {
        let snap = SpectralSnapshot::new(spec, theta, false)?;
        Ok(Self::from_tables(spec, theta, snap.tilted.lambda_tilde, snap.tilted.mu_tilde))
    }

    fn from_tables(spec: &StructuralFunctions, theta: &ParamVector, up: Vec<f64>, down: Vec<f64>) -> Self {
        // The tilt multiplies every mechanism at a state by the same factor, so
        // marks are drawn from the untilted proportions rescaled to `up[k]`.
        let mark_cum = (0..=spec.capacity())
            .map(|k| {
                let lambda = spec.lambda(&theta.beta, k);
                let scale = if lambda > 0.0 { up[k] / lambda } else { 0.0 };
                let mut acc = 0.0;
                theta
                    .beta
                    .iter()
                    .enumerate()
                    .map(|(i, b)| {
                        acc += b * spec.f(i, k) * scale;
                        acc
                    })
                    .collect()
            })
            .collect();
        Self { capacity: spec.capacity(), up, down, mark_cum }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn birth_rate(&self, state: usize) -> f64 {
        self.up[state]
    }

    pub fn death_rate(&self, state: usize) -> f64 {
        self.down[state]
    }

    /// One path from `x0` on `[0, horizon]`, stopping early at absorption.
    pub fn run(&self, x0: usize, horizon: f64, rng: &mut StreamRng, mark: bool) -> Result<Trajectory> {
        if x0 > self.capacity {
            return Err(BdpError::Argument(format!("x0 = {x0} exceeds N = {}", self.capacity)));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(BdpError::Argument(format!("horizon must be positive and finite, got {horizon}")));
        }
        let mut events = Vec::new();
        let mut t = 0.0;
        let mut x = x0;
        let mut absorbed_at = if x0 == 0 { Some(0.0) } else { None };
        while x > 0 {
            let up = self.up[x];
            let total = up + self.down[x];
            if total <= 0.0 {
                break;
            }
            t += rng.exponential(total);
            if t > horizon {
                break;
            }
            // One uniform decides both the direction and, for births, the mechanism.
            let u = rng.uniform() * total;
            let event = if u < up {
                x += 1;
                let mark = if mark {
                    let cum = &self.mark_cum[x - 1];
                    Some(cum.iter().position(|c| u < *c).unwrap_or(cum.len() - 1))
                } else {
                    None
                };
                Event { t, direction: Direction::Birth, mark }
            } else {
                x -= 1;
                Event { t, direction: Direction::Death, mark: None }
            };
            events.push(event);
            if x == 0 {
                absorbed_at = Some(t);
            }
        }
        Ok(Trajectory { capacity: self.capacity, x0, horizon, events, absorbed_at, marked: mark })
    }
}

/// A survival-conditioned path and the number of attempts it took.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedTrajectory {
    pub trajectory: Trajectory,
    pub attempts: usize,
}

/// Options for rejection sampling of surviving paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditioningOptions {
    pub max_attempts: usize,
    /// Conditioning horizon `T' >= T`; `None` conditions on survival to `T`.
    pub survival_horizon: Option<f64>,
}

impl Default for ConditioningOptions {
    fn default() -> Self {
        Self { max_attempts: 10_000, survival_horizon: None }
    }
}

/// Gillespie simulation of the original chain.
pub fn simulate_original(
    spec: &StructuralFunctions,
    theta: &ParamVector,
    x0: usize,
    horizon: f64,
    stream: &RngStream,
    mark: bool,
) -> Result<Trajectory> {
    Simulator::original(spec, theta)?.run(x0, horizon, &mut stream.attempt(0), mark)
}

impl Simulator {
    /// Repeats [`Simulator::run`] on fresh sub-streams until the path survives.
    pub fn run_conditioned(
        &self,
        x0: usize,
        horizon: f64,
        stream: &RngStream,
        mark: bool,
        options: ConditioningOptions,
    ) -> Result<ConditionedTrajectory> {
        if options.max_attempts == 0 {
            return Err(BdpError::Argument("max_attempts must be at least 1".into()));
        }
        let survival_horizon = options.survival_horizon.unwrap_or(horizon);
        if survival_horizon < horizon {
            return Err(BdpError::Argument(format!(
                "conditioning horizon {survival_horizon} is shorter than the observation window {horizon}"
            )));
        }
        for attempt in 0..options.max_attempts {
            let path = self.run(x0, survival_horizon, &mut stream.attempt(attempt as u64), mark)?;
            if path.survived() {
                let trajectory = if survival_horizon > horizon { path.truncate(horizon) } else { path };
                return Ok(ConditionedTrajectory { trajectory, attempts: attempt + 1 });
            }
        }
        Err(BdpError::RejectionBudget { attempts: options.max_attempts, survival_fraction: 0.0 })
    }
}

/// Rejection sampling from `P(. | tau_0 > T)`.
pub fn simulate_survival_conditioned(
    spec: &StructuralFunctions,
    theta: &ParamVector,
    x0: usize,
    horizon: f64,
    stream: &RngStream,
    mark: bool,
    options: ConditioningOptions,
) -> Result<ConditionedTrajectory> {
    Simulator::original(spec, theta)?.run_conditioned(x0, horizon, stream, mark, options)
}

/// Gillespie simulation of the Doob-transformed chain on `1..=N`.
pub fn simulate_q_process(
    spec: &StructuralFunctions,
    theta: &ParamVector,
    x0: usize,
    horizon: f64,
    stream: &RngStream,
    mark: bool,
) -> Result<Trajectory> {
    if x0 == 0 {
        return Err(BdpError::Argument("the Q-process lives on 1..=N".into()));
    }
    Simulator::q_process(spec, theta)?.run(x0, horizon, &mut stream.attempt(0), mark)
}

/// Free-function form of [`Trajectory::state_at`].
pub fn state_at(traj: &Trajectory, t: f64) -> Result<usize> {
    traj.state_at(t)
}
