//! Receding-horizon ergodic control.
//!
//! Each replan minimizes
//! `J = q * eps(c, phi) + sum 1/2 u^T R u dt + w_b * int barrier(x) dt`
//! over piecewise-constant controls on the planning grid, where `c` are the
//! coefficients of the realized history joined with the predicted horizon.
//! Gradients come from the discrete adjoint of the RK4 scheme, so they are
//! exact for the discretized objective. The descent is projected onto the
//! control bounds with Armijo backtracking and is warm-started from the
//! previous plan shifted by one controller tick.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::dynamics::{barrier_penalty, step_rk4, step_rk4_linearized, step_rk4_unchecked, ControlAffine, SoftBox};
use crate::error::{Error, Result};
use crate::spectral::{project_point, Basis, BasisScratch, CoefficientSet, FrequencyWeights};
use crate::task::TaskDefinition;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Memory {
    /// Coefficients average over everything since the rollout started.
    FullHistory,
    /// Coefficients average over the prediction horizon only.
    HorizonOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Armijo {
    /// Largest trial step, as a fraction of the control half-range applied
    /// along the max-norm-normalized descent direction.
    pub initial_step: f64,
    pub shrink: f64,
    /// Sufficient-decrease constant.
    pub slope: f64,
    pub max_backtracks: usize,
}

impl Default for Armijo {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            shrink: 0.5,
            slope: 1e-4,
            max_backtracks: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Ergodic cost weight.
    pub q: f64,
    /// Diagonal of `R`; a single entry is broadcast to every channel.
    pub control_weight: Vec<f64>,
    /// Coefficient order used by the controller (at most the task's order).
    pub order: usize,
    pub horizon: f64,
    pub sample_time: f64,
    /// Grid of the piecewise-constant plan and of the predictive model.
    pub plan_dt: f64,
    /// Integration step of the simulated plant.
    pub sim_dt: f64,
    pub max_iters: usize,
    pub armijo: Armijo,
    /// Stop descending once one iteration lowers `J` by less than this.
    pub tolerance: f64,
    pub memory: Memory,
    pub barrier_weight: f64,
    /// Record every n-th plant step in the rollout trajectory.
    pub record_every: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            q: 20.0,
            control_weight: vec![0.01],
            order: 10,
            horizon: 1.5,
            sample_time: 0.1,
            plan_dt: 0.01,
            sim_dt: 0.002,
            max_iters: 15,
            armijo: Armijo::default(),
            tolerance: 1e-7,
            memory: Memory::FullHistory,
            barrier_weight: 100.0,
            record_every: 5,
        }
    }
}

fn ratio(a: f64, b: f64, what: &str) -> Result<usize> {
    let r = a / b;
    let n = r.round();
    if n < 1.0 || (r - n).abs() > 1e-6 {
        return Err(Error::InvalidConfig(format!("{what} must be a positive integer multiple ({a} / {b})")));
    }
    Ok(n as usize)
}

impl MpcConfig {
    /// Settings used for the benchmark experiments: a stronger ergodic weight
    /// and a longer horizon than the interactive defaults.
    pub fn benchmark() -> Self {
        Self {
            q: 100.0,
            horizon: 3.0,
            ..Self::default()
        }
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| Error::InvalidConfig(format!("{key} = {value}: {e}"));
        let num = || value.trim().parse::<f64>().map_err(|e| bad(&e));
        let int = || value.trim().parse::<usize>().map_err(|e| bad(&e));
        match key.trim() {
            "q" => self.q = num()?,
            "r" | "control_weight" => {
                self.control_weight = value
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|e| bad(&e)))
                    .collect::<Result<_>>()?
            }
            "k" | "order" => self.order = int()?,
            "horizon" => self.horizon = num()?,
            "sample_time" => self.sample_time = num()?,
            "plan_dt" => self.plan_dt = num()?,
            "sim_dt" => self.sim_dt = num()?,
            "max_iters" => self.max_iters = int()?,
            "step" => self.armijo.initial_step = num()?,
            "shrink" => self.armijo.shrink = num()?,
            "slope" => self.armijo.slope = num()?,
            "max_backtracks" => self.armijo.max_backtracks = int()?,
            "tolerance" => self.tolerance = num()?,
            "memory" => {
                self.memory = match value.trim() {
                    "full_history" => Memory::FullHistory,
                    "horizon_only" => Memory::HorizonOnly,
                    other => return Err(bad(&format!("unknown memory mode {other:?}"))),
                }
            }
            "barrier_weight" => self.barrier_weight = num()?,
            "record_every" => self.record_every = int()?,
            other => return Err(Error::InvalidConfig(format!("unknown controller setting {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self, control_dim: usize) -> Result<()> {
        if !(self.q > 0.0 && self.q.is_finite()) {
            return Err(Error::InvalidConfig(format!("q must be positive, got {}", self.q)));
        }
        if !(self.control_weight.len() == 1 || self.control_weight.len() == control_dim) {
            return Err(Error::DimensionMismatch {
                expected: control_dim,
                got: self.control_weight.len(),
            });
        }
        if self.control_weight.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidConfig("control weights must be positive".into()));
        }
        if !(self.sample_time > 0.0 && self.sample_time <= self.horizon) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < sample_time <= horizon, got {} / {}",
                self.sample_time, self.horizon
            )));
        }
        if !(self.sim_dt > 0.0 && self.plan_dt > 0.0) {
            return Err(Error::InvalidConfig("time steps must be positive".into()));
        }
        ratio(self.horizon, self.plan_dt, "horizon / plan_dt")?;
        ratio(self.sample_time, self.plan_dt, "sample_time / plan_dt")?;
        ratio(self.plan_dt, self.sim_dt, "plan_dt / sim_dt")?;
        let a = &self.armijo;
        if !(a.initial_step > 0.0 && a.shrink > 0.0 && a.shrink < 1.0 && a.slope >= 0.0 && a.slope < 1.0) {
            return Err(Error::InvalidConfig("invalid Armijo parameters".into()));
        }
        if !(self.barrier_weight >= 0.0) || self.record_every == 0 {
            return Err(Error::InvalidConfig("invalid barrier weight or record stride".into()));
        }
        Ok(())
    }

    pub fn horizon_steps(&self) -> usize {
        (self.horizon / self.plan_dt).round() as usize
    }

    pub fn steps_per_tick(&self) -> usize {
        (self.sample_time / self.plan_dt).round() as usize
    }

    pub fn substeps(&self) -> usize {
        (self.plan_dt / self.sim_dt).round() as usize
    }

    fn r(&self, j: usize) -> f64 {
        if self.control_weight.len() == 1 {
            self.control_weight[0]
        } else {
            self.control_weight[j]
        }
    }
}

/// Running trapezoid integral of every basis function along the realized
/// trajectory.
#[derive(Debug, Clone)]
pub struct CoefficientAccumulator {
    sums: Vec<f64>,
    elapsed: f64,
    last: Option<(f64, Vec<f64>)>,
}

impl CoefficientAccumulator {
    pub fn new(len: usize) -> Self {
        Self {
            sums: vec![0.0; len],
            elapsed: 0.0,
            last: None,
        }
    }

    pub fn elapsed(&self) -> f64 {
        self.elapsed
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    /// Adds a sample given its basis values `f`.
    pub fn push(&mut self, t: f64, f: &[f64]) {
        if let Some((t_prev, f_prev)) = &mut self.last {
            let h = t - *t_prev;
            for ((s, a), b) in self.sums.iter_mut().zip(f_prev.iter()).zip(f) {
                *s += 0.5 * h * (a + b);
            }
            self.elapsed += h;
            *t_prev = t;
            f_prev.copy_from_slice(f);
        } else {
            self.last = Some((t, f.to_vec()));
        }
    }

    /// Time-averaged coefficients so far; the latest sample when no time has elapsed.
    pub fn average(&self) -> Option<Vec<f64>> {
        if self.elapsed > 0.0 {
            Some(self.sums.iter().map(|s| s / self.elapsed).collect())
        } else {
            self.last.as_ref().map(|(_, f)| f.clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanDiagnostics {
    pub t: f64,
    pub eps_before: f64,
    pub eps_after: f64,
    pub j_before: f64,
    pub j_after: f64,
    pub iterations: usize,
    pub line_search_steps: usize,
    /// `J` after each accepted step, starting with the warm-start value.
    pub j_history: Vec<f64>,
    pub line_search_exhausted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub j: f64,
    pub eps: f64,
}

struct Workspace {
    states: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    dldx: Vec<f64>,
    coeff: Vec<f64>,
    adj: Vec<f64>,
    point: Vec<f64>,
    pgrad: Vec<f64>,
    bgrad: Vec<f64>,
    lambda: Vec<f64>,
    lambda_next: Vec<f64>,
    fk: Vec<f64>,
    scratch: BasisScratch,
}

/// Ergodic receding-horizon controller for one rollout.
pub struct ErgodicController<S: ControlAffine> {
    sys: S,
    cfg: MpcConfig,
    basis: Basis,
    weights: FrequencyWeights,
    phi: Vec<f64>,
    projection: Vec<usize>,
    soft_box: SoftBox,
    history: CoefficientAccumulator,
    plan: Vec<f64>,
    last_step: f64,
    ws: Workspace,
}

/// Lower-order part of `phi`.
fn truncate(phi: &CoefficientSet, order: usize) -> Result<Vec<f64>> {
    if order > phi.order() {
        return Err(Error::InvalidConfig(format!(
            "controller order {order} exceeds task order {}",
            phi.order()
        )));
    }
    Ok(crate::spectral::lattice(order, phi.dim()).map(|k| phi.get(&k.0)).collect())
}

impl<S: ControlAffine> ErgodicController<S> {
    pub fn new(sys: S, task: &TaskDefinition, cfg: MpcConfig) -> Result<Self> {
        let n = sys.state_dim();
        let m = sys.control_dim();
        cfg.validate(m)?;
        if let Some(&bad) = task.projection.iter().find(|&&i| i >= n) {
            return Err(Error::DimensionMismatch { expected: n, got: bad + 1 });
        }
        let task = task.clone().bind_system(&sys)?;
        let dim = task.domain.dim();
        let basis = Basis::new(task.domain.clone(), cfg.order);
        let weights = FrequencyWeights::new(cfg.order, dim);
        let phi = truncate(&task.phi, cfg.order)?;
        let steps = cfg.horizon_steps();
        let len = basis.len();
        let ws = Workspace {
            states: vec![0.0; (steps + 1) * n],
            a: vec![0.0; steps * n * n],
            b: vec![0.0; steps * n * m],
            dldx: vec![0.0; (steps + 1) * n],
            coeff: vec![0.0; len],
            adj: vec![0.0; len],
            point: vec![0.0; dim],
            pgrad: vec![0.0; dim],
            bgrad: vec![0.0; n],
            lambda: vec![0.0; n],
            lambda_next: vec![0.0; n],
            fk: vec![0.0; len],
            scratch: basis.scratch(),
        };
        let soft_box = sys.soft_box();
        let initial_step = cfg.armijo.initial_step;
        Ok(Self {
            sys,
            basis,
            weights,
            phi,
            projection: task.projection.clone(),
            soft_box,
            history: CoefficientAccumulator::new(len),
            plan: vec![0.0; steps * m],
            last_step: initial_step,
            cfg,
            ws,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn system(&self) -> &S {
        &self.sys
    }

    pub fn history(&self) -> &CoefficientAccumulator {
        &self.history
    }

    /// Current plan, row-major `horizon_steps x m`.
    pub fn plan_controls(&self) -> &[f64] {
        &self.plan
    }

    pub fn set_plan(&mut self, plan: &[f64]) -> Result<()> {
        if plan.len() != self.plan.len() {
            return Err(Error::DimensionMismatch {
                expected: self.plan.len(),
                got: plan.len(),
            });
        }
        self.plan.copy_from_slice(plan);
        Ok(())
    }

    /// Feeds one realized sample into the coefficient memory.
    pub fn observe(&mut self, t: f64, x: &[f64]) {
        project_point(x, &self.projection, self.basis.domain(), &mut self.ws.point);
        self.basis.eval_into(&self.ws.point, &mut self.ws.scratch, &mut self.ws.fk);
        self.history.push(t, &self.ws.fk);
    }

    /// Ergodic metric of the realized trajectory so far.
    pub fn running_eps(&self) -> f64 {
        match self.history.average() {
            Some(c) => self.eps_of(&c),
            None => f64::NAN,
        }
    }

    fn eps_of(&self, c: &[f64]) -> f64 {
        c.iter()
            .zip(&self.phi)
            .zip(self.weights.values())
            .map(|((a, b), l)| l * (a - b) * (a - b))
            .sum()
    }

    fn quad_weight(&self, i: usize) -> f64 {
        let steps = self.cfg.horizon_steps();
        if i == 0 || i == steps {
            0.5 * self.cfg.plan_dt
        } else {
            self.cfg.plan_dt
        }
    }

    fn total_time(&self) -> f64 {
        match self.cfg.memory {
            Memory::FullHistory => self.history.elapsed() + self.cfg.horizon,
            Memory::HorizonOnly => self.cfg.horizon,
        }
    }

    /// Forward-simulates `controls` from `x0` into the workspace, optionally
    /// storing step sensitivities, and returns the objective.
    fn forward(&mut self, x0: &[f64], controls: &[f64], linearize: bool) -> Result<ObjectiveValue> {
        let n = self.sys.state_dim();
        let m = self.sys.control_dim();
        let steps = self.cfg.horizon_steps();
        let dt = self.cfg.plan_dt;
        self.ws.states[..n].copy_from_slice(x0);
        for i in 0..steps {
            let (head, tail) = self.ws.states.split_at_mut((i + 1) * n);
            let x = &head[i * n..];
            let u = &controls[i * m..(i + 1) * m];
            if linearize {
                step_rk4_linearized(
                    &self.sys,
                    x,
                    u,
                    dt,
                    &mut tail[..n],
                    &mut self.ws.a[i * n * n..(i + 1) * n * n],
                    &mut self.ws.b[i * n * m..(i + 1) * n * m],
                );
            } else {
                step_rk4_unchecked(&self.sys, x, u, dt, &mut tail[..n]);
            }
        }
        if self.ws.states.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged);
        }

        let total = self.total_time();
        match self.cfg.memory {
            Memory::FullHistory => self.ws.coeff.copy_from_slice(self.history.sums()),
            Memory::HorizonOnly => self.ws.coeff.iter_mut().for_each(|v| *v = 0.0),
        }
        let mut barrier = 0.0;
        for i in 0..=steps {
            let w = self.quad_weight(i);
            let x = &self.ws.states[i * n..(i + 1) * n];
            project_point(x, &self.projection, self.basis.domain(), &mut self.ws.point);
            self.basis.accumulate(&self.ws.point, w, &mut self.ws.scratch, &mut self.ws.coeff);
            if self.cfg.barrier_weight > 0.0 {
                barrier += w * barrier_penalty(x, &self.soft_box, &mut self.ws.bgrad);
            }
        }
        self.ws.coeff.iter_mut().for_each(|c| *c /= total);
        let eps = self.eps_of(&self.ws.coeff);
        let mut effort = 0.0;
        for i in 0..steps {
            for j in 0..m {
                let u = controls[i * m + j];
                effort += 0.5 * self.cfg.r(j) * u * u * dt;
            }
        }
        Ok(ObjectiveValue {
            j: self.cfg.q * eps + effort + self.cfg.barrier_weight * barrier,
            eps,
        })
    }

    /// Objective of `controls` applied from `x0`, given the current memory.
    pub fn evaluate(&mut self, x0: &[f64], controls: &[f64]) -> Result<ObjectiveValue> {
        self.check_shapes(x0, controls)?;
        self.forward(x0, controls, false)
    }

    fn check_shapes(&self, x0: &[f64], controls: &[f64]) -> Result<()> {
        if x0.len() != self.sys.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.sys.state_dim(),
                got: x0.len(),
            });
        }
        if controls.len() != self.cfg.horizon_steps() * self.sys.control_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.horizon_steps() * self.sys.control_dim(),
                got: controls.len(),
            });
        }
        Ok(())
    }

    /// `dJ/du` for every planned control, via the discrete adjoint.
    pub fn gradient(&mut self, x0: &[f64], controls: &[f64]) -> Result<(ObjectiveValue, Vec<f64>)> {
        self.check_shapes(x0, controls)?;
        let value = self.forward(x0, controls, true)?;
        let n = self.sys.state_dim();
        let m = self.sys.control_dim();
        let steps = self.cfg.horizon_steps();
        let dt = self.cfg.plan_dt;
        let total = self.total_time();

        // a_k = q * 2 Lambda_k (c_k - phi_k) / T
        for k in 0..self.ws.adj.len() {
            self.ws.adj[k] = self.cfg.q * 2.0 * self.weights.values()[k] * (self.ws.coeff[k] - self.phi[k]) / total;
        }
        for i in 1..=steps {
            let w = self.quad_weight(i);
            let x = &self.ws.states[i * n..(i + 1) * n];
            let dldx = &mut self.ws.dldx[i * n..(i + 1) * n];
            dldx.iter_mut().for_each(|v| *v = 0.0);
            let clamped = project_point(x, &self.projection, self.basis.domain(), &mut self.ws.point);
            self.basis
                .weighted_gradient(&self.ws.point, &self.ws.adj, &mut self.ws.scratch, &mut self.ws.pgrad);
            for (d, &si) in self.projection.iter().enumerate() {
                if clamped & (1 << d) == 0 {
                    dldx[si] += w * self.ws.pgrad[d];
                }
            }
            if self.cfg.barrier_weight > 0.0 {
                barrier_penalty(x, &self.soft_box, &mut self.ws.bgrad);
                for s in 0..n {
                    dldx[s] += self.cfg.barrier_weight * w * self.ws.bgrad[s];
                }
            }
        }

        let mut grad = vec![0.0; steps * m];
        self.ws.lambda.copy_from_slice(&self.ws.dldx[steps * n..(steps + 1) * n]);
        for i in (0..steps).rev() {
            let a = &self.ws.a[i * n * n..(i + 1) * n * n];
            let b = &self.ws.b[i * n * m..(i + 1) * n * m];
            for j in 0..m {
                let mut g = self.cfg.r(j) * controls[i * m + j] * dt;
                for s in 0..n {
                    g += b[s * m + j] * self.ws.lambda[s];
                }
                grad[i * m + j] = g;
            }
            for c in 0..n {
                let mut acc = self.ws.dldx[i * n + c];
                for r in 0..n {
                    acc += a[r * n + c] * self.ws.lambda[r];
                }
                self.ws.lambda_next[c] = acc;
            }
            std::mem::swap(&mut self.ws.lambda, &mut self.ws.lambda_next);
        }
        Ok((value, grad))
    }

    fn project_controls(&self, u: &mut [f64]) {
        let m = self.sys.control_dim();
        for row in u.chunks_mut(m) {
            self.sys.clamp_control(row);
        }
    }

    /// Shifts the previous plan by one controller tick (zero-padded tail) and
    /// improves it by projected gradient descent from `x_now`.
    pub fn plan(&mut self, t: f64, x_now: &[f64]) -> Result<ReplanDiagnostics> {
        let m = self.sys.control_dim();
        let shift = self.cfg.steps_per_tick() * m;
        let len = self.plan.len();
        self.plan.copy_within(shift.min(len).., 0);
        self.plan[len - shift.min(len)..].iter_mut().for_each(|v| *v = 0.0);
        let mut plan = std::mem::take(&mut self.plan);
        let result = self.descend(t, x_now, &mut plan);
        self.plan = plan;
        result
    }

    fn descend(&mut self, t: f64, x_now: &[f64], plan: &mut Vec<f64>) -> Result<ReplanDiagnostics> {
        self.check_shapes(x_now, plan)?;
        self.project_controls(plan);
        let start = self.forward(x_now, plan, false)?;
        let mut current = start;
        let mut diag = ReplanDiagnostics {
            t,
            eps_before: start.eps,
            eps_after: start.eps,
            j_before: start.j,
            j_after: start.j,
            iterations: 0,
            line_search_steps: 0,
            j_history: vec![start.j],
            line_search_exhausted: false,
        };
        let m = self.sys.control_dim();
        let half_range: Vec<f64> = (0..m)
            .map(|j| 0.5 * (self.sys.control_upper()[j] - self.sys.control_lower()[j]))
            .collect();
        let mut trial = vec![0.0; plan.len()];
        for _ in 0..self.cfg.max_iters {
            let (_, grad) = self.gradient(x_now, plan)?;
            let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
            if gmax == 0.0 || !gmax.is_finite() {
                break;
            }
            let mut alpha = (2.0 * self.last_step).min(self.cfg.armijo.initial_step);
            let mut accepted = None;
            for _ in 0..=self.cfg.armijo.max_backtracks {
                diag.line_search_steps += 1;
                for (i, v) in trial.iter_mut().enumerate() {
                    *v = plan[i] - alpha * half_range[i % m] * grad[i] / gmax;
                }
                self.project_controls(&mut trial);
                let slope: f64 = grad.iter().zip(trial.iter().zip(plan.iter())).map(|(g, (a, b))| g * (a - b)).sum();
                match self.forward(x_now, &trial, false) {
                    Ok(v) if v.j <= current.j + self.cfg.armijo.slope * slope && slope < 0.0 => {
                        accepted = Some(v);
                        break;
                    }
                    _ => alpha *= self.cfg.armijo.shrink,
                }
            }
            diag.iterations += 1;
            let Some(next) = accepted else {
                diag.line_search_exhausted = true;
                break;
            };
            self.last_step = alpha;
            plan.copy_from_slice(&trial);
            let decrease = current.j - next.j;
            current = next;
            diag.j_history.push(current.j);
            if decrease < self.cfg.tolerance {
                break;
            }
        }
        diag.eps_after = current.eps;
        diag.j_after = current.j;
        Ok(diag)
    }
}

/// Objective of a given predicted trajectory, independent of a controller.
///
/// `states` has one more entry than `controls`; consecutive states are
/// `dt` apart. `history` supplies the coefficient memory (integrated basis
/// values and elapsed time) when `cfg.memory` is full history.
pub fn objective<S: ControlAffine + Clone>(
    sys: &S,
    task: &TaskDefinition,
    cfg: &MpcConfig,
    history: Option<&CoefficientAccumulator>,
    states: &[Vec<f64>],
    controls: &[Vec<f64>],
    dt: f64,
) -> Result<ObjectiveValue> {
    if states.len() != controls.len() + 1 {
        return Err(Error::DimensionMismatch {
            expected: controls.len() + 1,
            got: states.len(),
        });
    }
    let task = task.clone().bind_system(sys)?;
    let basis = Basis::new(task.domain.clone(), cfg.order);
    let weights = FrequencyWeights::new(cfg.order, task.domain.dim());
    let phi = truncate(&task.phi, cfg.order)?;
    let mut scratch = basis.scratch();
    let mut point = vec![0.0; task.domain.dim()];
    let horizon = dt * controls.len() as f64;
    let (mut sums, total) = match (cfg.memory, history) {
        (Memory::FullHistory, Some(h)) => (h.sums().to_vec(), h.elapsed() + horizon),
        _ => (vec![0.0; basis.len()], horizon),
    };
    let last = states.len() - 1;
    let soft_box = sys.soft_box();
    let mut bgrad = vec![0.0; sys.state_dim()];
    let mut barrier = 0.0;
    for (i, x) in states.iter().enumerate() {
        let w = if i == 0 || i == last { 0.5 * dt } else { dt };
        project_point(x, &task.projection, &task.domain, &mut point);
        basis.accumulate(&point, w, &mut scratch, &mut sums);
        barrier += w * barrier_penalty(x, &soft_box, &mut bgrad);
    }
    let eps: f64 = sums
        .iter()
        .zip(&phi)
        .zip(weights.values())
        .map(|((s, p), l)| l * (s / total - p).powi(2))
        .sum();
    let mut effort = 0.0;
    for u in controls {
        if u.len() != sys.control_dim() {
            return Err(Error::DimensionMismatch {
                expected: sys.control_dim(),
                got: u.len(),
            });
        }
        for (j, v) in u.iter().enumerate() {
            effort += 0.5 * cfg.r(j) * v * v * dt;
        }
    }
    Ok(ObjectiveValue {
        j: cfg.q * eps + effort + cfg.barrier_weight * barrier,
        eps,
    })
}

/// Closed-loop trajectory and per-replan diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub trajectory: Trajectory,
    /// Control applied from each recorded sample on.
    pub controls: Vec<Vec<f64>>,
    /// Ergodic metric of the realized trajectory up to each recorded sample.
    pub eps_running: Vec<f64>,
    pub replans: Vec<ReplanDiagnostics>,
    pub final_eps: f64,
    pub cancelled: bool,
    pub error: Option<String>,
}

impl RolloutResult {
    /// Rollout CSV: `t, x_0..x_{n-1}, u_0..u_{m-1}, eps_running`.
    pub fn to_csv(&self) -> String {
        let n = self.trajectory.system.state_dim();
        let m = self.trajectory.system.control_dim();
        let mut out = String::from("t");
        for i in 0..n {
            out.push_str(&format!(",x_{i}"));
        }
        for j in 0..m {
            out.push_str(&format!(",u_{j}"));
        }
        out.push_str(",eps_running\n");
        for (k, t) in self.trajectory.times.iter().enumerate() {
            out.push_str(&format!("{t}"));
            for v in &self.trajectory.states[k] {
                out.push_str(&format!(",{v}"));
            }
            for v in &self.controls[k] {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", self.eps_running[k]));
        }
        out
    }

    /// Parses the trajectory columns of a rollout CSV back.
    pub fn trajectory_from_csv(system: crate::dynamics::SystemKind, text: &str) -> Result<Trajectory> {
        let n = system.state_dim();
        let mut times = Vec::new();
        let mut states = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            if vals.len() < n + 1 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected at least {} columns", n + 1),
                });
            }
            times.push(vals[0]);
            states.push(vals[1..=n].to_vec());
        }
        Trajectory::new(system, times, states)
    }
}

/// Per-sample callback for streaming; return `false` to stop early.
pub trait RolloutObserver {
    fn on_sample(&mut self, t: f64, x: &[f64], u: &[f64]) -> bool;
}

impl<F: FnMut(f64, &[f64], &[f64]) -> bool> RolloutObserver for F {
    fn on_sample(&mut self, t: f64, x: &[f64], u: &[f64]) -> bool {
        self(t, x, u)
    }
}

/// Runs plan/apply cycles at the controller tick until `t_final`.
pub fn run_closed_loop<S: ControlAffine>(sys: S, task: &TaskDefinition, cfg: &MpcConfig, x0: &[f64], t_final: f64) -> Result<RolloutResult> {
    run_closed_loop_with(sys, task, cfg, x0, t_final, None, &mut |_: f64, _: &[f64], _: &[f64]| true)
}

/// [`run_closed_loop`] with a cancellation flag and a sample observer.
pub fn run_closed_loop_with<S: ControlAffine>(
    sys: S,
    task: &TaskDefinition,
    cfg: &MpcConfig,
    x0: &[f64],
    t_final: f64,
    cancel: Option<&AtomicBool>,
    observer: &mut dyn RolloutObserver,
) -> Result<RolloutResult> {
    if !(t_final > 0.0 && t_final.is_finite()) {
        return Err(Error::InvalidConfig(format!("final time must be positive, got {t_final}")));
    }
    let kind = sys.kind();
    let n = sys.state_dim();
    let m = sys.control_dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x0.len() });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state"));
    }
    let mut ctrl = ErgodicController::new(sys, task, cfg.clone())?;
    let ticks = ((t_final / cfg.sample_time) - 1e-9).ceil().max(1.0) as usize;
    let steps_per_tick = cfg.steps_per_tick();
    let substeps = cfg.substeps();

    let mut x = x0.to_vec();
    ctrl.sys.wrap(&mut x);
    let mut t = 0.0;
    let mut step_count: usize = 0;
    let mut times = vec![0.0];
    let mut states = vec![x.clone()];
    let mut controls: Vec<Vec<f64>> = Vec::new();
    ctrl.observe(0.0, &x);
    let mut eps_running = vec![ctrl.running_eps()];
    let mut replans = Vec::with_capacity(ticks);
    let mut cancelled = false;
    let mut error = None;
    let mut keep_going = observer.on_sample(0.0, &x, &vec![0.0; m]);

    'outer: for _ in 0..ticks {
        if !keep_going || cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
            cancelled = true;
            break;
        }
        match ctrl.plan(t, &x) {
            Ok(d) => replans.push(d),
            Err(e) => {
                error = Some(format!("replan at t = {t:.3} failed: {e}"));
                break;
            }
        }
        let applied: Vec<f64> = ctrl.plan_controls()[..steps_per_tick * m].to_vec();
        for u in applied.chunks(m) {
            if controls.len() < times.len() {
                controls.push(u.to_vec());
            }
            for _ in 0..substeps {
                match step_rk4(&ctrl.sys, &x, u, cfg.sim_dt) {
                    Ok(next) => x = next,
                    Err(e) => {
                        error = Some(format!("plant integration at t = {t:.3} failed: {e}"));
                        break 'outer;
                    }
                }
                step_count += 1;
                t = step_count as f64 * cfg.sim_dt;
                ctrl.observe(t, &x);
                if step_count % cfg.record_every == 0 {
                    times.push(t);
                    states.push(x.clone());
                    eps_running.push(ctrl.running_eps());
                    keep_going &= observer.on_sample(t, &x, u);
                    if controls.len() < times.len() - 1 {
                        controls.push(u.to_vec());
                    }
                }
            }
        }
    }
    while controls.len() < times.len() {
        controls.push(controls.last().cloned().unwrap_or_else(|| vec![0.0; m]));
    }
    let final_eps = *eps_running.last().unwrap_or(&f64::NAN);
    Ok(RolloutResult {
        trajectory: Trajectory::new(kind, times, states)?,
        controls,
        eps_running,
        replans,
        final_eps,
        cancelled,
        error,
    })
}
