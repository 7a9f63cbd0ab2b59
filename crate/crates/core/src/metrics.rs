//! Task-success metrics for the benchmark systems.

use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, SystemKind};
use crate::error::{Error, Result};
use crate::spectral::{ergodic_metric, FrequencyWeights};
use crate::task::TaskDefinition;
use crate::trajectory::Trajectory;

/// Cart-pole success region around the inverted equilibrium.
pub const THETA_TOL: f64 = 0.4;
pub const THETA_DOT_TOL: f64 = 0.75;

/// Extra distance beyond the obstacle radius that counts as a collision
/// when scoring cleaning runs.
pub const CLEARANCE_MARGIN: f64 = 0.02;

pub const CLEANING_GRID: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartpoleSuccess {
    pub total_success_time: f64,
    pub first_success_time: Option<f64>,
}

pub fn in_success_region(x: &[f64]) -> bool {
    wrap_angle(x[0]).abs() < THETA_TOL && x[1].abs() < THETA_DOT_TOL
}

/// Time spent inside the success region (trapezoid rule on the indicator)
/// and the first sample time inside it.
pub fn cartpole_success(traj: &Trajectory) -> Result<CartpoleSuccess> {
    traj.require(SystemKind::Cartpole)?;
    let inside: Vec<bool> = traj.states.iter().map(|x| in_success_region(x)).collect();
    let total = traj
        .times
        .windows(2)
        .zip(inside.windows(2))
        .map(|(t, s)| 0.5 * (t[1] - t[0]) * (s[0] as u8 + s[1] as u8) as f64)
        .sum();
    let first = inside.iter().position(|&s| s).map(|i| traj.times[i] - traj.times[0]);
    Ok(CartpoleSuccess {
        total_success_time: total,
        first_success_time: first,
    })
}

/// Ergodic metric between a trajectory's statistics and a reference task.
pub fn ergodicity_vs_true(traj: &Trajectory, true_task: &TaskDefinition) -> Result<f64> {
    let c = traj.coefficients(&true_task.projection, true_task.order(), &true_task.domain)?;
    let w = FrequencyWeights::new(true_task.order(), true_task.domain.dim());
    ergodic_metric(&c, &true_task.phi, &w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Disk {
    pub fn distance(&self, p: &[f64]) -> f64 {
        ((p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

impl Workspace {
    pub fn unit() -> Self {
        Self {
            lower: [0.0, 0.0],
            upper: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.upper[0] > self.lower[0] && self.upper[1] > self.lower[1] {
            Ok(())
        } else {
            Err(Error::DegenerateWorkspace)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleaningScore {
    pub m: f64,
    pub collided: bool,
    pub covered_cells: usize,
    /// Cells not fully covered by the obstacle footprint.
    pub cleanable_cells: usize,
}

/// True if any sample is strictly closer than `radius + margin` to the disk center.
pub fn collides(traj: &Trajectory, obstacle: &Disk, margin: f64) -> bool {
    traj.states.iter().any(|x| obstacle.distance(x) < obstacle.radius + margin)
}

/// Coverage of a 5x5 workspace grid, zeroed on collision.
pub fn cleaning_score(traj: &Trajectory, obstacle: &Disk, workspace: &Workspace) -> Result<CleaningScore> {
    traj.require(SystemKind::Planar)?;
    workspace.validate()?;
    let g = CLEANING_GRID;
    let cw = (workspace.upper[0] - workspace.lower[0]) / g as f64;
    let ch = (workspace.upper[1] - workspace.lower[1]) / g as f64;
    let mut excluded = vec![false; g * g];
    for (idx, ex) in excluded.iter_mut().enumerate() {
        let (i, j) = (idx / g, idx % g);
        let x0 = workspace.lower[0] + i as f64 * cw;
        let y0 = workspace.lower[1] + j as f64 * ch;
        *ex = [(x0, y0), (x0 + cw, y0), (x0, y0 + ch), (x0 + cw, y0 + ch)]
            .iter()
            .all(|&(x, y)| obstacle.distance(&[x, y]) <= obstacle.radius);
    }
    let cleanable = excluded.iter().filter(|e| !**e).count();
    let collided = collides(traj, obstacle, CLEARANCE_MARGIN);
    let mut covered = vec![false; g * g];
    for x in &traj.states {
        if x[0] < workspace.lower[0] || x[0] > workspace.upper[0] || x[1] < workspace.lower[1] || x[1] > workspace.upper[1] {
            continue;
        }
        let i = (((x[0] - workspace.lower[0]) / cw) as usize).min(g - 1);
        let j = (((x[1] - workspace.lower[1]) / ch) as usize).min(g - 1);
        covered[i * g + j] = true;
    }
    let covered_cells = covered
        .iter()
        .zip(&excluded)
        .filter(|(c, e)| **c && !**e)
        .count();
    let m = if collided || cleanable == 0 {
        0.0
    } else {
        covered_cells as f64 / cleanable as f64
    };
    Ok(CleaningScore {
        m,
        collided,
        covered_cells,
        cleanable_cells: cleanable,
    })
}

/// Some sample within the target radius and no sample strictly inside the obstacle.
pub fn reach_success(traj: &Trajectory, target: &Disk, obstacle: &Disk) -> Result<bool> {
    traj.require(SystemKind::Planar)?;
    let reached = traj.states.iter().any(|x| target.distance(x) <= target.radius);
    Ok(reached && !collides(traj, obstacle, 0.0))
}
