//! Control-affine systems `x' = g(x) + h(x) u`, RK4 integration, and the
//! quadratic soft-box barrier.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::Domain;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Cartpole,
    Planar,
}

impl SystemKind {
    pub fn state_dim(self) -> usize {
        4
    }

    pub fn control_dim(self) -> usize {
        match self {
            SystemKind::Cartpole => 1,
            SystemKind::Planar => 2,
        }
    }

    pub fn state_names(self) -> &'static [&'static str] {
        match self {
            SystemKind::Cartpole => &["theta", "theta_dot", "x_c", "x_c_dot"],
            SystemKind::Planar => &["x", "y", "x_dot", "y_dot"],
        }
    }

    /// System with the default benchmark parameters.
    pub fn build(self) -> System {
        match self {
            SystemKind::Cartpole => System::CartPole(CartPole::default()),
            SystemKind::Planar => System::Planar(Planar::default()),
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SystemKind::Cartpole => "cartpole",
            SystemKind::Planar => "planar",
        })
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartpole" => Ok(SystemKind::Cartpole),
            "planar" => Ok(SystemKind::Planar),
            other => Err(Error::UnknownSystem(other.to_string())),
        }
    }
}

/// Per-state soft bounds; `+-inf` leaves a coordinate unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SoftBox {
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }
}

/// `sum_i max(0, x_i - hi_i)^2 + max(0, lo_i - x_i)^2` and its gradient.
pub fn barrier_penalty(x: &[f64], bounds: &SoftBox, grad: &mut [f64]) -> f64 {
    let mut value = 0.0;
    for i in 0..x.len() {
        let over = x[i] - bounds.upper[i];
        let under = bounds.lower[i] - x[i];
        grad[i] = 0.0;
        if over > 0.0 {
            value += over * over;
            grad[i] = 2.0 * over;
        } else if under > 0.0 {
            value += under * under;
            grad[i] = -2.0 * under;
        }
    }
    value
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

pub trait ControlAffine: Send + Sync {
    fn kind(&self) -> SystemKind;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    /// `g(x)`
    fn drift(&self, x: &[f64], out: &mut [f64]);
    /// `h(x)`, row-major `n x m`.
    fn control_matrix(&self, x: &[f64], out: &mut [f64]);
    /// `df/dx` at `(x, u)`, row-major `n x n`.
    fn jacobian(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    fn control_lower(&self) -> &[f64];
    fn control_upper(&self) -> &[f64];
    fn periodic(&self) -> &[bool];
    fn default_projection(&self) -> Vec<usize>;
    /// Ergodic domain over the default projection, periodic flags attached.
    fn ergodic_domain(&self) -> Domain;
    fn soft_box(&self) -> SoftBox;
    fn rest_state(&self) -> Vec<f64>;

    /// `f(x, u) = g(x) + h(x) u`
    fn deriv(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.state_dim();
        let m = self.control_dim();
        let mut h = [0.0; 16];
        self.drift(x, out);
        self.control_matrix(x, &mut h[..n * m]);
        for i in 0..n {
            for j in 0..m {
                out[i] += h[i * m + j] * u[j];
            }
        }
    }

    fn clamp_control(&self, u: &mut [f64]) {
        let (lo, hi) = (self.control_lower(), self.control_upper());
        for (j, v) in u.iter_mut().enumerate() {
            *v = v.clamp(lo[j], hi[j]);
        }
    }

    fn wrap(&self, x: &mut [f64]) {
        for (v, &p) in x.iter_mut().zip(self.periodic()) {
            if p {
                *v = wrap_angle(*v);
            }
        }
    }
}

/// Pendulum on a massless cart driven directly by cart acceleration.
///
/// State `[theta, theta_dot, x_c, x_c_dot]`, `theta = 0` upright and
/// `theta = +-pi` hanging at rest; input is the cart acceleration.
#[derive(Debug, Clone, PartialEq)]
pub struct CartPole {
    pub gravity: f64,
    pub length: f64,
    u_lower: [f64; 1],
    u_upper: [f64; 1],
    pub theta_dot_bound: f64,
    pub barrier_theta_dot: f64,
}

impl Default for CartPole {
    fn default() -> Self {
        Self::new(GRAVITY, 1.0, 20.0).expect("default cart-pole is valid")
    }
}

impl CartPole {
    pub fn new(gravity: f64, length: f64, u_max: f64) -> Result<Self> {
        if !(length > 0.0) {
            return Err(Error::InvalidConfig(format!("pole length {length} must be positive")));
        }
        if !(u_max > 0.0) {
            return Err(Error::InvalidConfig(format!("control bound {u_max} must be positive")));
        }
        Ok(Self {
            gravity,
            length,
            u_lower: [-u_max],
            u_upper: [u_max],
            theta_dot_bound: 6.0,
            barrier_theta_dot: 8.0,
        })
    }

    /// Energy per unit mass, `1/2 l^2 theta_dot^2 + g l cos(theta)`.
    pub fn energy(&self, x: &[f64]) -> f64 {
        0.5 * self.length * self.length * x[1] * x[1] + self.gravity * self.length * x[0].cos()
    }

    pub fn upright_energy(&self) -> f64 {
        self.gravity * self.length
    }
}

impl ControlAffine for CartPole {
    fn kind(&self) -> SystemKind {
        SystemKind::Cartpole
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = self.gravity * x[0].sin() / self.length;
        out[2] = x[3];
        out[3] = 0.0;
    }

    fn control_matrix(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = -x[0].cos() / self.length;
        out[2] = 0.0;
        out[3] = 1.0;
    }

    fn jacobian(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let (s, c) = x[0].sin_cos();
        out[1] = 1.0;
        out[4] = (self.gravity * c + u[0] * s) / self.length;
        out[2 * 4 + 3] = 1.0;
    }

    fn control_lower(&self) -> &[f64] {
        &self.u_lower
    }

    fn control_upper(&self) -> &[f64] {
        &self.u_upper
    }

    fn periodic(&self) -> &[bool] {
        &[true, false, false, false]
    }

    fn default_projection(&self) -> Vec<usize> {
        vec![0, 1]
    }

    fn ergodic_domain(&self) -> Domain {
        let b = self.theta_dot_bound;
        Domain::new(vec![-PI, -b], vec![2.0 * PI, 2.0 * b])
            .and_then(|d| d.with_periodic(vec![true, false]))
            .expect("cart-pole domain is valid")
    }

    fn soft_box(&self) -> SoftBox {
        let mut b = SoftBox::unbounded(4);
        b.lower[1] = -self.barrier_theta_dot;
        b.upper[1] = self.barrier_theta_dot;
        b
    }

    fn rest_state(&self) -> Vec<f64> {
        vec![PI, 0.0, 0.0, 0.0]
    }
}

/// Planar double integrator, state `[x, y, x_dot, y_dot]`, input `[x_ddot, y_ddot]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Planar {
    pub workspace_lower: [f64; 2],
    pub workspace_upper: [f64; 2],
    pub velocity_limit: f64,
    u_lower: [f64; 2],
    u_upper: [f64; 2],
}

impl Default for Planar {
    fn default() -> Self {
        Self::new([0.0, 0.0], [1.0, 1.0], 0.5, 2.0).expect("default planar system is valid")
    }
}

impl Planar {
    pub fn new(lower: [f64; 2], upper: [f64; 2], velocity_limit: f64, u_max: f64) -> Result<Self> {
        if !(upper[0] > lower[0] && upper[1] > lower[1]) {
            return Err(Error::DegenerateWorkspace);
        }
        if !(velocity_limit > 0.0 && u_max > 0.0) {
            return Err(Error::InvalidConfig("velocity and control limits must be positive".into()));
        }
        Ok(Self {
            workspace_lower: lower,
            workspace_upper: upper,
            velocity_limit,
            u_lower: [-u_max; 2],
            u_upper: [u_max; 2],
        })
    }
}

impl ControlAffine for Planar {
    fn kind(&self) -> SystemKind {
        SystemKind::Planar
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[2];
        out[1] = x[3];
        out[2] = 0.0;
        out[3] = 0.0;
    }

    fn control_matrix(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[2 * 2] = 1.0;
        out[3 * 2 + 1] = 1.0;
    }

    fn jacobian(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[2] = 1.0;
        out[4 + 3] = 1.0;
    }

    fn control_lower(&self) -> &[f64] {
        &self.u_lower
    }

    fn control_upper(&self) -> &[f64] {
        &self.u_upper
    }

    fn periodic(&self) -> &[bool] {
        &[false; 4]
    }

    fn default_projection(&self) -> Vec<usize> {
        vec![0, 1]
    }

    fn ergodic_domain(&self) -> Domain {
        let lo = self.workspace_lower;
        let hi = self.workspace_upper;
        Domain::new(lo.to_vec(), vec![hi[0] - lo[0], hi[1] - lo[1]]).expect("workspace is non-degenerate")
    }

    fn soft_box(&self) -> SoftBox {
        let v = self.velocity_limit;
        SoftBox {
            lower: vec![self.workspace_lower[0], self.workspace_lower[1], -v, -v],
            upper: vec![self.workspace_upper[0], self.workspace_upper[1], v, v],
        }
    }

    fn rest_state(&self) -> Vec<f64> {
        vec![
            0.5 * (self.workspace_lower[0] + self.workspace_upper[0]),
            0.5 * (self.workspace_lower[1] + self.workspace_upper[1]),
            0.0,
            0.0,
        ]
    }
}

/// One of the two benchmark systems.
#[derive(Debug, Clone, PartialEq)]
pub enum System {
    CartPole(CartPole),
    Planar(Planar),
}

impl System {
    fn inner(&self) -> &dyn ControlAffine {
        match self {
            System::CartPole(s) => s,
            System::Planar(s) => s,
        }
    }
}

impl ControlAffine for System {
    fn kind(&self) -> SystemKind {
        self.inner().kind()
    }
    fn state_dim(&self) -> usize {
        self.inner().state_dim()
    }
    fn control_dim(&self) -> usize {
        self.inner().control_dim()
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        self.inner().drift(x, out)
    }
    fn control_matrix(&self, x: &[f64], out: &mut [f64]) {
        self.inner().control_matrix(x, out)
    }
    fn jacobian(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.inner().jacobian(x, u, out)
    }
    fn control_lower(&self) -> &[f64] {
        self.inner().control_lower()
    }
    fn control_upper(&self) -> &[f64] {
        self.inner().control_upper()
    }
    fn periodic(&self) -> &[bool] {
        self.inner().periodic()
    }
    fn default_projection(&self) -> Vec<usize> {
        self.inner().default_projection()
    }
    fn ergodic_domain(&self) -> Domain {
        self.inner().ergodic_domain()
    }
    fn soft_box(&self) -> SoftBox {
        self.inner().soft_box()
    }
    fn rest_state(&self) -> Vec<f64> {
        self.inner().rest_state()
    }
}

pub fn cartpole_deriv(params: &CartPole, x: &[f64], u: f64) -> [f64; 4] {
    let mut out = [0.0; 4];
    params.deriv(x, &[u], &mut out);
    out
}

pub fn planar_deriv(x: &[f64], u: [f64; 2]) -> [f64; 4] {
    let mut out = [0.0; 4];
    Planar::default().deriv(x, &u, &mut out);
    out
}

const MAX_N: usize = 4;
const MAX_M: usize = 2;

fn rk4_raw<S: ControlAffine + ?Sized>(sys: &S, x: &[f64], u: &[f64], dt: f64, out: &mut [f64]) {
    let n = sys.state_dim();
    let mut k1 = [0.0; MAX_N];
    let mut k2 = [0.0; MAX_N];
    let mut k3 = [0.0; MAX_N];
    let mut k4 = [0.0; MAX_N];
    let mut s = [0.0; MAX_N];
    sys.deriv(x, u, &mut k1[..n]);
    for i in 0..n {
        s[i] = x[i] + 0.5 * dt * k1[i];
    }
    sys.deriv(&s[..n], u, &mut k2[..n]);
    for i in 0..n {
        s[i] = x[i] + 0.5 * dt * k2[i];
    }
    sys.deriv(&s[..n], u, &mut k3[..n]);
    for i in 0..n {
        s[i] = x[i] + dt * k3[i];
    }
    sys.deriv(&s[..n], u, &mut k4[..n]);
    for i in 0..n {
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    sys.wrap(&mut out[..n]);
}

/// Classical RK4 step with zero-order-hold control. The control is clamped
/// to the system bounds first and periodic coordinates are wrapped after.
pub fn step_rk4<S: ControlAffine + ?Sized>(sys: &S, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidTimeStep(dt));
    }
    let n = sys.state_dim();
    let m = sys.control_dim();
    if x.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x.len() });
    }
    if u.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: u.len() });
    }
    let mut uc = [0.0; MAX_M];
    uc[..m].copy_from_slice(u);
    sys.clamp_control(&mut uc[..m]);
    let mut out = vec![0.0; n];
    rk4_raw(sys, x, &uc[..m], dt, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationDiverged);
    }
    Ok(out)
}

/// RK4 step without clamping or validation, writing into `out`.
pub(crate) fn step_rk4_unchecked<S: ControlAffine + ?Sized>(sys: &S, x: &[f64], u: &[f64], dt: f64, out: &mut [f64]) {
    rk4_raw(sys, x, u, dt, out)
}

/// RK4 step together with its sensitivities `A = dx+/dx` (`n x n`) and
/// `B = dx+/du` (`n x m`), both row-major. Angle wrapping has unit derivative.
pub(crate) fn step_rk4_linearized<S: ControlAffine + ?Sized>(
    sys: &S,
    x: &[f64],
    u: &[f64],
    dt: f64,
    out: &mut [f64],
    a: &mut [f64],
    b: &mut [f64],
) {
    let n = sys.state_dim();
    let m = sys.control_dim();
    let mut k = [[0.0; MAX_N]; 4];
    let mut dkdx = [[0.0; MAX_N * MAX_N]; 4];
    let mut dkdu = [[0.0; MAX_N * MAX_M]; 4];
    let mut s = [0.0; MAX_N];
    let mut dsdx = [0.0; MAX_N * MAX_N];
    let mut dsdu = [0.0; MAX_N * MAX_M];
    let mut jac = [0.0; MAX_N * MAX_N];
    let mut h = [0.0; MAX_N * MAX_M];
    let coef = [0.0, 0.5, 0.5, 1.0];

    for stage in 0..4 {
        // stage point and its sensitivities
        for i in 0..n {
            s[i] = x[i];
            for j in 0..n {
                dsdx[i * n + j] = if i == j { 1.0 } else { 0.0 };
            }
            for j in 0..m {
                dsdu[i * m + j] = 0.0;
            }
        }
        if stage > 0 {
            let c = coef[stage] * dt;
            let prev = stage - 1;
            for i in 0..n {
                s[i] += c * k[prev][i];
                for j in 0..n {
                    dsdx[i * n + j] += c * dkdx[prev][i * n + j];
                }
                for j in 0..m {
                    dsdu[i * m + j] += c * dkdu[prev][i * m + j];
                }
            }
        }
        sys.deriv(&s[..n], u, &mut k[stage][..n]);
        sys.jacobian(&s[..n], u, &mut jac[..n * n]);
        sys.control_matrix(&s[..n], &mut h[..n * m]);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..n {
                    acc += jac[i * n + l] * dsdx[l * n + j];
                }
                dkdx[stage][i * n + j] = acc;
            }
            for j in 0..m {
                let mut acc = h[i * m + j];
                for l in 0..n {
                    acc += jac[i * n + l] * dsdu[l * m + j];
                }
                dkdu[stage][i * m + j] = acc;
            }
        }
    }
    let w = [dt / 6.0, dt / 3.0, dt / 3.0, dt / 6.0];
    for i in 0..n {
        out[i] = x[i] + (0..4).map(|st| w[st] * k[st][i]).sum::<f64>();
        for j in 0..n {
            let id = if i == j { 1.0 } else { 0.0 };
            a[i * n + j] = id + (0..4).map(|st| w[st] * dkdx[st][i * n + j]).sum::<f64>();
        }
        for j in 0..m {
            b[i * m + j] = (0..4).map(|st| w[st] * dkdu[st][i * m + j]).sum::<f64>();
        }
    }
    sys.wrap(&mut out[..n]);
}
