//! Synthetic demonstrators: an energy-shaping + LQR cart-pole expert, failed
//! low-energy pumping, and scripted planar reach/clean tracks.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, SMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::demos::{Demonstration, Label, Source};
use crate::dynamics::{step_rk4, wrap_angle, CartPole, ControlAffine, Planar};
use crate::error::{Error, Result};
use crate::metrics::{self, Disk, Workspace};
use crate::trajectory::Trajectory;

/// Sampling and control-update rate of every synthetic demonstrator.
pub const DEMO_RATE_HZ: f64 = 50.0;
pub const SUBSTEPS: usize = 10;

/// Holds `u` over one period `dt`, integrating in `SUBSTEPS` RK4 steps.
pub fn held_step<S: ControlAffine + ?Sized>(sys: &S, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
    let mut x = x.to_vec();
    for _ in 0..SUBSTEPS {
        x = step_rk4(sys, &x, u, dt / SUBSTEPS as f64)?;
    }
    Ok(x)
}

/// Simulates a sampled-data loop: `policy` is queried at 50 Hz and its
/// output held while the plant integrates at 2 ms.
fn simulate<S: ControlAffine>(
    sys: &S,
    x0: &[f64],
    duration: f64,
    mut policy: impl FnMut(f64, &[f64]) -> Vec<f64>,
) -> Result<Trajectory> {
    let dt = 1.0 / DEMO_RATE_HZ;
    let steps = (duration * DEMO_RATE_HZ).round() as usize;
    let mut x = x0.to_vec();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(x.clone());
    for i in 0..steps {
        let t = i as f64 * dt;
        let u = policy(t, &x);
        x = held_step(sys, &x, &u, dt)?;
        times.push((i + 1) as f64 * dt);
        states.push(x.clone());
    }
    Trajectory::new(sys.kind(), times, states)
}

// ---------------------------------------------------------------- cart-pole

/// Gains of the upright regulator on `[theta, theta_dot, x_c_dot]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regulator {
    pub gain: [f64; 3],
    /// Discrete closed-loop matrix `A_d - B_d K` at the 50 Hz update rate.
    pub closed_loop: Matrix3<f64>,
}

/// Discrete LQR for the pendulum linearized about upright, with the cart
/// velocity included so the cart does not run away while balancing.
pub fn upright_regulator(cp: &CartPole) -> Result<Regulator> {
    let dt = 1.0 / DEMO_RATE_HZ;
    // [theta, theta_dot, xc_dot | u]
    let mut m = SMatrix::<f64, 4, 4>::zeros();
    m[(0, 1)] = 1.0;
    m[(1, 0)] = cp.gravity / cp.length;
    m[(1, 3)] = -1.0 / cp.length;
    m[(2, 3)] = 1.0;
    let e = (m * dt).exp();
    let a: Matrix3<f64> = e.fixed_view::<3, 3>(0, 0).into_owned();
    let b: Vector3<f64> = e.fixed_view::<3, 1>(0, 3).into_owned();
    let q = Matrix3::from_diagonal(&Vector3::new(10.0, 10.0, 0.5));
    let r = 0.05;

    let mut p = q;
    let mut k = Vector3::zeros().transpose();
    for _ in 0..10_000 {
        let s = r + (b.transpose() * p * b)[0];
        k = (b.transpose() * p * a) / s;
        let next = q + a.transpose() * p * a - a.transpose() * p * b * k;
        let delta = (next - p).abs().max();
        p = next;
        if delta < 1e-12 * p.abs().max() {
            break;
        }
    }
    if !k.iter().all(|v| v.is_finite()) {
        return Err(Error::Generation("Riccati iteration diverged".into()));
    }
    Ok(Regulator {
        gain: [k[0], k[1], k[2]],
        closed_loop: a - b * k,
    })
}

/// Parameters of the expert swing-up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertConfig {
    pub energy_gain: f64,
    /// Switch to the regulator once `|theta|` drops below this.
    pub catch_angle: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            energy_gain: 1.0,
            catch_angle: 0.4,
        }
    }
}

fn expert_policy(cp: &CartPole, reg: &Regulator, cfg: &ExpertConfig, x: &[f64]) -> f64 {
    let theta = wrap_angle(x[0]);
    if theta.abs() < cfg.catch_angle {
        -(reg.gain[0] * theta + reg.gain[1] * x[1] + reg.gain[2] * x[3])
    } else {
        // sign(0) taken as +1 so the pendulum leaves the bottom equilibrium
        let s = if x[1] * theta.cos() >= 0.0 { 1.0 } else { -1.0 };
        cfg.energy_gain * (cp.energy(x) - cp.upright_energy()) * s
    }
}

/// Expert swing-up from the hanging rest state with additive Gaussian
/// control noise of standard deviation `noise_scale`.
pub fn expert_cartpole(duration: f64, noise_scale: f64, seed: u64) -> Result<Demonstration> {
    if duration < 10.0 {
        return Err(Error::InvalidConfig(format!("expert demos need at least 10 s, got {duration}")));
    }
    if !(noise_scale >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise scale must be nonnegative, got {noise_scale}")));
    }
    let cp = CartPole::default();
    let reg = upright_regulator(&cp)?;
    let cfg = ExpertConfig::default();
    let required = 0.5 * duration - 5.0;
    let mut last = 0.0;
    for attempt in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9)));
        let noise = Normal::new(0.0, noise_scale.max(f64::MIN_POSITIVE)).expect("valid normal");
        let traj = simulate(&cp, &cp.rest_state(), duration, |_, x| {
            let mut u = expert_policy(&cp, &reg, &cfg, x);
            if noise_scale > 0.0 {
                u += noise.sample(&mut rng);
            }
            vec![u]
        })?;
        last = metrics::cartpole_success(&traj)?.total_success_time;
        if last > required {
            return Demonstration::new(format!("expert-s{seed}"), Label::Positive, Source::Synthetic, traj);
        }
    }
    Err(Error::Generation(format!(
        "expert failed to stabilize (seed {seed}, best success {last:.2} s of required {required:.2} s)"
    )))
}

/// Failed novice attempt: randomized pumping that regulates the energy to a
/// level well below the upright one, so the pole swings around the bottom.
pub fn negative_cartpole(duration: f64, seed: u64) -> Result<Demonstration> {
    if duration < 10.0 {
        return Err(Error::InvalidConfig(format!("negative demos need at least 10 s, got {duration}")));
    }
    let cp = CartPole::default();
    for attempt in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9)));
        // swing amplitude measured from the bottom
        let amplitude: f64 = rng.random_range(0.5..1.1);
        let target = -cp.gravity * cp.length * amplitude.cos();
        let gain: f64 = rng.random_range(0.3..1.0);
        let noise = Normal::new(0.0, 3.0).expect("valid normal");
        let mut jitter = 0.0;
        let traj = simulate(&cp, &cp.rest_state(), duration, |_, x| {
            jitter = 0.9 * jitter + 0.1 * noise.sample(&mut rng);
            let s = if x[1] * x[0].cos() >= 0.0 { 1.0 } else { -1.0 };
            vec![gain * (cp.energy(x) - target) * s + jitter]
        })?;
        if metrics::cartpole_success(&traj)?.first_success_time.is_none() {
            return Demonstration::new(format!("negative-s{seed}"), Label::Negative, Source::Synthetic, traj);
        }
    }
    Err(Error::Generation(format!("negative demo kept succeeding (seed {seed})")))
}

// ------------------------------------------------------------------- planar

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanarTask {
    Reach,
    Clean,
}

impl fmt::Display for PlanarTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlanarTask::Reach => "reach",
            PlanarTask::Clean => "clean",
        })
    }
}

impl FromStr for PlanarTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reach" => Ok(PlanarTask::Reach),
            "clean" => Ok(PlanarTask::Clean),
            other => Err(Error::InvalidConfig(format!("unknown planar task {other:?}"))),
        }
    }
}

/// Geometry of a planar scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub task: PlanarTask,
    pub workspace: Workspace,
    pub obstacle: Disk,
    pub target: Option<Disk>,
}

impl Scenario {
    pub fn reach() -> Self {
        Self {
            task: PlanarTask::Reach,
            workspace: Workspace::unit(),
            obstacle: Disk {
                center: [0.5, 0.5],
                radius: 0.12,
            },
            target: Some(Disk {
                center: [0.85, 0.5],
                radius: 0.06,
            }),
        }
    }

    pub fn clean() -> Self {
        Self {
            task: PlanarTask::Clean,
            workspace: Workspace::unit(),
            obstacle: Disk {
                center: [0.5, 0.5],
                radius: 0.15,
            },
            target: None,
        }
    }

    pub fn for_task(task: PlanarTask) -> Self {
        match task {
            PlanarTask::Reach => Self::reach(),
            PlanarTask::Clean => Self::clean(),
        }
    }

    /// Random rollout start at rest, at least 0.1 clear of the obstacle and target.
    pub fn random_start(&self, rng: &mut impl Rng) -> [f64; 4] {
        loop {
            let p = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
            let clear_target = self.target.is_none_or(|t| t.distance(&p) > t.radius + 0.1);
            if clear_target && self.obstacle.distance(&p) > self.obstacle.radius + 0.1 {
                break [p[0], p[1], 0.0, 0.0];
            }
        }
    }
}

/// Reference moving at constant speed along a polyline, then holding the end.
struct Polyline {
    points: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
    speed: f64,
}

impl Polyline {
    fn new(points: Vec<[f64; 2]>, speed: f64) -> Self {
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cumulative.push(cumulative.last().unwrap() + d);
        }
        Self { points, cumulative, speed }
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    fn sample(&self, t: f64) -> ([f64; 2], [f64; 2]) {
        let s = self.speed * t;
        if s >= self.length() {
            return (*self.points.last().unwrap(), [0.0, 0.0]);
        }
        let i = self.cumulative.partition_point(|c| *c <= s).saturating_sub(1).min(self.points.len() - 2);
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let (a, b) = (self.points[i], self.points[i + 1]);
        let dir = [(b[0] - a[0]) / seg, (b[1] - a[1]) / seg];
        let r = s - self.cumulative[i];
        ([a[0] + dir[0] * r, a[1] + dir[1] * r], [dir[0] * self.speed, dir[1] * self.speed])
    }
}

/// Constant-speed orbit about `center` whose radius moves linearly from `r0`
/// to `r1` over `loops` turns.
struct Spiral {
    center: [f64; 2],
    r0: f64,
    rate: f64,
    omega: f64,
    phase: f64,
    duration: f64,
}

impl Spiral {
    fn new(center: [f64; 2], r0: f64, r1: f64, loops: f64, rng: &mut ChaCha8Rng) -> Self {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let phase = rng.random_range(0.0..2.0 * PI);
        let turn = 2.0 * PI * loops;
        // a(t) = phase + (v / rate) ln(r(t) / r0) with r(t) = r0 + rate t
        let rate = TRACK_SPEED * (r1 / r0).ln() / turn;
        let duration = if rate > 0.0 { (r1 - r0) / rate } else { turn * r0 / TRACK_SPEED };
        Self {
            center,
            r0,
            rate,
            omega: sign * TRACK_SPEED,
            phase,
            duration,
        }
    }

    fn sample(&self, t: f64) -> ([f64; 2], [f64; 2]) {
        let r = self.r0 + self.rate * t;
        let a = if self.rate > 0.0 {
            self.phase + self.omega / self.rate * (r / self.r0).ln()
        } else {
            self.phase + self.omega / self.r0 * t
        };
        let da = self.omega / r;
        let (sa, ca) = a.sin_cos();
        (
            [self.center[0] + r * ca, self.center[1] + r * sa],
            [self.rate * ca - r * da * sa, self.rate * sa + r * da * ca],
        )
    }
}

const KP: f64 = 30.0;
const KD: f64 = 11.0;

fn track(sys: &Planar, duration: f64, reference: impl Fn(f64) -> ([f64; 2], [f64; 2])) -> Result<Trajectory> {
    let (p0, v0) = reference(0.0);
    let x0 = [p0[0], p0[1], v0[0], v0[1]];
    simulate(sys, &x0, duration, |t, x| {
        let (p, v) = reference(t);
        (0..2).map(|i| KP * (p[i] - x[i]) + KD * (v[i] - x[i + 2])).collect()
    })
}

const TRACK_SPEED: f64 = 0.3;

fn reach_positive(sc: &Scenario, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let target = sc.target.expect("reach scenario has a target").center;
    let c = sc.obstacle.center;
    let start = [rng.random_range(0.08..0.2), rng.random_range(0.15..0.85)];
    let side = if start[1] > c[1] || (start[1] == c[1] && rng.random_bool(0.5)) { 1.0 } else { -1.0 };
    let clear = sc.obstacle.radius + rng.random_range(0.14..0.22);
    vec![
        start,
        [c[0] - 0.12, c[1] + side * clear],
        [c[0] + 0.12, c[1] + side * clear],
        [target[0] + rng.random_range(-0.02..0.02), target[1] + rng.random_range(-0.02..0.02)],
    ]
}

fn clean_positive(rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let j = |rng: &mut ChaCha8Rng| rng.random_range(-0.02..0.02);
    let mut pts = Vec::new();
    for (row, y) in [0.1, 0.3, 0.5, 0.7, 0.9].into_iter().enumerate() {
        let y = y + j(rng);
        let lane: Vec<[f64; 2]> = if row == 2 {
            // middle lane detours over the obstacle
            vec![
                [0.08 + j(rng), y],
                [0.27 + j(rng), y],
                [0.27 + j(rng), 0.72],
                [0.73 + j(rng), 0.72],
                [0.73 + j(rng), y],
                [0.92 + j(rng), y],
            ]
        } else {
            vec![[0.08 + j(rng), y], [0.92 + j(rng), y]]
        };
        if row % 2 == 0 {
            pts.extend(lane);
        } else {
            pts.extend(lane.into_iter().rev());
        }
    }
    let flip_x = rng.random_bool(0.5);
    let flip_y = rng.random_bool(0.5);
    let transpose = rng.random_bool(0.5);
    for p in &mut pts {
        if flip_x {
            p[0] = 1.0 - p[0];
        }
        if flip_y {
            p[1] = 1.0 - p[1];
        }
        if transpose {
            p.swap(0, 1);
        }
    }
    pts
}

/// Scripted planar demonstration.
///
/// Positive reach: start on the left, pass above or below the obstacle and
/// settle on the target. Negative reach: approach and circle the obstacle.
/// Positive clean: randomized lawnmower sweep around the obstacle. Negative
/// clean: tight orbits over the obstacle.
pub fn scripted_planar(task: PlanarTask, variant: Label, seed: u64) -> Result<Demonstration> {
    let sys = Planar::default();
    let sc = Scenario::for_task(task);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = sc.obstacle.center;
    let traj = match (task, variant) {
        (PlanarTask::Reach, Label::Positive) => {
            let path = Polyline::new(reach_positive(&sc, &mut rng), TRACK_SPEED);
            let duration = rng.random_range(10.0..15.0f64).max(path.length() / TRACK_SPEED + 1.0);
            track(&sys, duration, |t| path.sample(t))?
        }
        (PlanarTask::Clean, Label::Positive) => {
            let path = Polyline::new(clean_positive(&mut rng), TRACK_SPEED);
            track(&sys, path.length() / TRACK_SPEED + 0.5, |t| path.sample(t))?
        }
        (PlanarTask::Reach, Label::Negative) => {
            let r = rng.random_range(0.04..sc.obstacle.radius);
            let duration = rng.random_range(10.0..15.0);
            let orbit = Spiral::new(c, r, r, duration * TRACK_SPEED / (2.0 * PI * r), &mut rng);
            track(&sys, orbit.duration, |t| orbit.sample(t))?
        }
        (PlanarTask::Clean, Label::Negative) => {
            let r = rng.random_range(0.05..sc.obstacle.radius);
            let orbit = Spiral::new(c, r, r, 4.0, &mut rng);
            track(&sys, orbit.duration, |t| orbit.sample(t))?
        }
    };
    let id = format!("{task}-{variant}-s{seed}");
    Demonstration::new(id, variant, Source::Synthetic, traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::DemoSet;
    use crate::dynamics::SystemKind;
    use crate::metrics::{cleaning_score, reach_success};
    use crate::task::{learn_task, FusionConfig, FusionMode};

    #[test]
    fn regulator_is_stable() {
        let reg = upright_regulator(&CartPole::default()).unwrap();
        let eig = reg.closed_loop.complex_eigenvalues();
        for e in eig.iter() {
            assert!(e.norm() < 1.0, "eigenvalue {e} outside unit circle");
        }
    }

    #[test]
    fn noiseless_expert_swings_up_and_holds() {
        let demo = expert_cartpole(30.0, 0.0, 0).unwrap();
        let s = metrics::cartpole_success(&demo.trajectory).unwrap();
        let first = s.first_success_time.unwrap();
        assert!(first > 0.5, "needs at least one pump, first success at {first}");
        let tr = &demo.trajectory;
        let held = tr.times.iter().zip(&tr.states).filter(|(t, _)| **t >= first).all(|(_, x)| metrics::in_success_region(x));
        assert!(held);
        assert!((s.total_success_time - (30.0 - first)).abs() <= 0.5 / DEMO_RATE_HZ + 1e-9);
        assert_eq!(demo.trajectory.len(), 1501);
        assert_eq!(demo.source, Source::Synthetic);
    }

    #[test]
    fn noiseless_expert_is_deterministic() {
        let a = expert_cartpole(12.0, 0.0, 1).unwrap();
        let b = expert_cartpole(12.0, 0.0, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noisy_expert_meets_success_bound() {
        for seed in 0..3 {
            let demo = expert_cartpole(20.0, 1.0, seed).unwrap();
            let s = metrics::cartpole_success(&demo.trajectory).unwrap();
            assert!(s.total_success_time > 5.0);
        }
    }

    #[test]
    fn short_durations_rejected() {
        assert!(expert_cartpole(5.0, 0.0, 0).is_err());
        assert!(negative_cartpole(9.9, 0).is_err());
    }

    #[test]
    fn negatives_never_succeed_and_stay_low() {
        let mut set = DemoSet::new(SystemKind::Cartpole);
        for seed in 0..4 {
            let demo = negative_cartpole(15.0, seed).unwrap();
            assert_eq!(metrics::cartpole_success(&demo.trajectory).unwrap().total_success_time, 0.0);
            set.push(demo).unwrap();
        }
        assert_ne!(set.demos[0].trajectory, set.demos[1].trajectory);
        let task = learn_task(&set, FusionMode::Posneg, &FusionConfig::default());
        assert!(task.is_err());
        let task = learn_task(
            &DemoSet::from_demos(
                SystemKind::Cartpole,
                set.demos
                    .iter()
                    .cloned()
                    .map(|mut d| {
                        d.label = Label::Positive;
                        d
                    })
                    .collect(),
            )
            .unwrap(),
            FusionMode::Posonly,
            &FusionConfig::default(),
        )
        .unwrap();
        let grid = task.density(64, true).unwrap();
        assert!(grid.argmax()[0].abs() > 2.0);
    }

    #[test]
    fn positive_reach_demos_succeed() {
        let sc = Scenario::reach();
        for seed in 0..13 {
            let d = scripted_planar(PlanarTask::Reach, Label::Positive, seed).unwrap();
            assert!(reach_success(&d.trajectory, &sc.target.unwrap(), &sc.obstacle).unwrap(), "seed {seed}");
            assert!(!metrics::collides(&d.trajectory, &sc.obstacle, 0.02), "seed {seed}");
        }
    }

    #[test]
    fn negative_reach_demos_fail() {
        let sc = Scenario::reach();
        for seed in 0..5 {
            let d = scripted_planar(PlanarTask::Reach, Label::Negative, seed).unwrap();
            assert!(!reach_success(&d.trajectory, &sc.target.unwrap(), &sc.obstacle).unwrap());
        }
    }

    #[test]
    fn positive_clean_demos_cover_without_collision() {
        let sc = Scenario::clean();
        for seed in 0..5 {
            let d = scripted_planar(PlanarTask::Clean, Label::Positive, seed).unwrap();
            let s = cleaning_score(&d.trajectory, &sc.obstacle, &sc.workspace).unwrap();
            assert!(!s.collided, "seed {seed}");
            assert!(s.m >= 0.8, "seed {seed}: m = {}", s.m);
        }
    }

    #[test]
    fn negative_clean_demos_orbit_the_obstacle() {
        let sc = Scenario::clean();
        for seed in 0..5 {
            let d = scripted_planar(PlanarTask::Clean, Label::Negative, seed).unwrap();
            for x in &d.trajectory.states {
                assert!(sc.obstacle.distance(x) < 2.0 * sc.obstacle.radius);
            }
            assert_eq!(cleaning_score(&d.trajectory, &sc.obstacle, &sc.workspace).unwrap().m, 0.0);
        }
    }

    #[test]
    fn generated_demos_round_trip() {
        let mut set = DemoSet::new(SystemKind::Planar);
        set.push(scripted_planar(PlanarTask::Clean, Label::Positive, 3).unwrap()).unwrap();
        set.push(scripted_planar(PlanarTask::Reach, Label::Negative, 4).unwrap()).unwrap();
        let text = set.to_jsonl();
        let back = DemoSet::read_from(text.as_bytes()).unwrap();
        assert_eq!(back, set);
    }
}
