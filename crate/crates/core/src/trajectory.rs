use serde::{Deserialize, Serialize};

use crate::dynamics::SystemKind;
use crate::error::{Error, Result};
use crate::spectral::{self, CoefficientSet, Domain};

/// Timestamped state samples of one of the benchmark systems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub system: SystemKind,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Checks shape, finiteness and strictly increasing timestamps.
    pub fn new(system: SystemKind, times: Vec<f64>, states: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() != states.len() {
            return Err(Error::DimensionMismatch {
                expected: times.len(),
                got: states.len(),
            });
        }
        let n = system.state_dim();
        for x in &states {
            if x.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: x.len(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("trajectory state"));
            }
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("trajectory time"));
        }
        for (i, w) in times.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::TimeRegression {
                    index: i + 1,
                    prev: w[0],
                    next: w[1],
                });
            }
        }
        Ok(Self {
            system,
            times,
            states,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn duration(&self) -> f64 {
        match (self.times.first(), self.times.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    pub fn coefficients(&self, projection: &[usize], order: usize, domain: &Domain) -> Result<CoefficientSet> {
        spectral::traj_coefficients(&self.times, &self.states, projection, order, domain)
    }

    pub fn require(&self, system: SystemKind) -> Result<()> {
        if self.system != system {
            return Err(Error::WrongSystem {
                expected: system.to_string(),
                got: self.system.to_string(),
            });
        }
        Ok(())
    }

    /// Same samples with every timestamp offset by `dt`.
    pub fn shifted(&self, dt: f64) -> Self {
        Self {
            system: self.system,
            times: self.times.iter().map(|t| t + dt).collect(),
            states: self.states.clone(),
        }
    }
}
