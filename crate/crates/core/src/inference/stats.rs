use serde::{Deserialize, Serialize};

use crate::error::{BdpError, Result};
use crate::model::StructuralFunctions;
use crate::simulate::{Direction, Trajectory};

/// Statewise occupation times and jump counts of one observed path.
///
/// Tables are indexed by state `0..=N`. Births are recorded at the pre-jump
/// state (`1..N-1`), deaths likewise (`1..N`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub horizon: f64,
    pub occupation: Vec<f64>,
    pub births: Vec<u64>,
    pub deaths: Vec<u64>,
    /// `births_by_mech[i][k]`: type-`i` births from state `k`, when marks are observed.
    pub births_by_mech: Option<Vec<Vec<u64>>>,
}

impl SufficientStats {
    /// Exact integrals and counts over the piecewise-constant path.
    pub fn from_trajectory(traj: &Trajectory, mechanisms: usize) -> Result<Self> {
        let n = traj.capacity;
        let mut occupation = vec![0.0; n + 1];
        let mut births = vec![0u64; n + 1];
        let mut deaths = vec![0u64; n + 1];
        let mut by_mech = traj.is_marked().then(|| vec![vec![0u64; n + 1]; mechanisms]);

        let mut x = traj.x0;
        let mut last = 0.0;
        for e in &traj.events {
            occupation[x] += e.t - last;
            last = e.t;
            match e.direction {
                Direction::Birth => {
                    births[x] += 1;
                    if let Some(table) = by_mech.as_mut() {
                        let i = e.mark.ok_or_else(|| BdpError::Argument("unmarked birth in a marked path".into()))?;
                        if i >= mechanisms {
                            return Err(BdpError::Argument(format!("mechanism mark {i} out of range")));
                        }
                        table[i][x] += 1;
                    }
                    x += 1;
                }
                Direction::Death => {
                    deaths[x] += 1;
                    x -= 1;
                }
            }
        }
        occupation[x] += traj.horizon - last;
        Ok(Self { horizon: traj.horizon, occupation, births, deaths, births_by_mech: by_mech })
    }

    pub fn capacity(&self) -> usize {
        self.occupation.len() - 1
    }

    pub fn is_marked(&self) -> bool {
        self.births_by_mech.is_some()
    }

    /// Same statistics with the mechanism table dropped.
    pub fn unmarked(&self) -> Self {
        Self { births_by_mech: None, ..self.clone() }
    }

    pub fn total_births(&self) -> u64 {
        self.births.iter().sum()
    }

    pub fn total_deaths(&self) -> u64 {
        self.deaths.iter().sum()
    }

    /// `sum_k f_i(k) T_k`.
    pub fn birth_exposure(&self, spec: &StructuralFunctions, mechanism: usize) -> f64 {
        self.occupation.iter().enumerate().map(|(k, t)| spec.f(mechanism, k) * t).sum()
    }

    /// `sum_k r(k) T_k`.
    pub fn death_exposure(&self, spec: &StructuralFunctions) -> f64 {
        self.occupation.iter().enumerate().map(|(k, t)| spec.r(k) * t).sum()
    }

    /// Type-`i` birth total `sum_k N_{i,k}`.
    pub fn mechanism_births(&self, mechanism: usize) -> Option<u64> {
        self.births_by_mech.as_ref().map(|t| t[mechanism].iter().sum())
    }

    /// Shape and consistency checks against a model.
    pub fn validate(&self, spec: &StructuralFunctions) -> Result<()> {
        let n = spec.capacity();
        if self.occupation.len() != n + 1 || self.births.len() != n + 1 || self.deaths.len() != n + 1 {
            return Err(BdpError::Argument(format!("statistics tables do not cover states 0..={n}")));
        }
        if !(self.horizon > 0.0) || self.occupation.iter().any(|t| !(*t >= 0.0)) {
            return Err(BdpError::Argument("occupation times must be nonnegative with a positive horizon".into()));
        }
        let total: f64 = self.occupation.iter().sum();
        if (total - self.horizon).abs() > 1e-9 * self.horizon {
            return Err(BdpError::Argument(format!("occupation times sum to {total}, horizon is {}", self.horizon)));
        }
        if self.births[0] != 0 || self.births[n] != 0 || self.deaths[0] != 0 {
            return Err(BdpError::Argument("jumps recorded from a state that cannot make them".into()));
        }
        if let Some(table) = &self.births_by_mech {
            if table.len() != spec.mechanisms() {
                return Err(BdpError::Argument("marked table has the wrong number of mechanisms".into()));
            }
            for k in 0..=n {
                let sum: u64 = table.iter().map(|row| row.get(k).copied().unwrap_or(0)).sum();
                if sum != self.births[k] {
                    return Err(BdpError::Argument(format!("marked births at state {k} do not add up")));
                }
            }
        }
        Ok(())
    }
}

/// Free-function form of [`SufficientStats::from_trajectory`].
pub fn sufficient_stats(traj: &Trajectory, mechanisms: usize) -> Result<SufficientStats> {
    SufficientStats::from_trajectory(traj, mechanisms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::Event;

    fn path(events: Vec<Event>, x0: usize, horizon: f64) -> Trajectory {
        Trajectory { capacity: 5, x0, horizon, events, absorbed_at: None, marked: false }
    }

    #[test]
    fn eventless_path() {
        let s = SufficientStats::from_trajectory(&path(vec![], 3, 2.5), 1).unwrap();
        assert_eq!(s.occupation[3], 2.5);
        assert_eq!(s.total_births() + s.total_deaths(), 0);
    }

    #[test]
    fn single_birth() {
        let e = Event { t: 1.0, direction: Direction::Birth, mark: None };
        let s = SufficientStats::from_trajectory(&path(vec![e], 2, 2.0), 1).unwrap();
        assert_eq!(s.occupation[2], 1.0);
        assert_eq!(s.occupation[3], 1.0);
        assert_eq!(s.births[2], 1);
        assert!(!s.is_marked());
    }

    #[test]
    fn marked_counts_add_up() {
        let spec = StructuralFunctions::sis(5, 2).unwrap();
        let events = vec![
            Event { t: 0.5, direction: Direction::Birth, mark: Some(1) },
            Event { t: 0.7, direction: Direction::Birth, mark: Some(0) },
            Event { t: 1.1, direction: Direction::Death, mark: None },
        ];
        let mut traj = path(events, 2, 3.0);
        traj.marked = true;
        let s = SufficientStats::from_trajectory(&traj, 2).unwrap();
        s.validate(&spec).unwrap();
        let table = s.births_by_mech.as_ref().unwrap();
        assert_eq!(table[1][2], 1);
        assert_eq!(table[0][3], 1);
        assert_eq!(s.deaths[4], 1);
        assert_eq!(s.mechanism_births(0), Some(1));
    }
}
