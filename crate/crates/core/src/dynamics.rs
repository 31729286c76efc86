//! Closed-form rigid-body model of the two-link arm hanging from a bar.
//!
//! Angles follow the acrobot convention: `q1` is the shoulder angle measured
//! from the downward vertical (anticlockwise positive) and `q2` is the elbow
//! angle relative to the first link. Only the elbow is actuated.

use std::path::Path;

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Continuous torque rating of the elbow motor (N·m); feedback output is
/// clamped to it.
pub const MOTOR_TORQUE_LIMIT: f64 = 6.0;

/// Physical parameters of the plant, SI units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub l1: f64,
    pub l2: f64,
    pub lc1: f64,
    pub lc2: f64,
    pub m1: f64,
    pub m2: f64,
    /// Rotational inertia of link 1 about its COM.
    pub i1: f64,
    /// Rotational inertia of link 2 about its COM.
    pub i2: f64,
    pub g: f64,
    /// Viscous damping at the passive hook/bar pivot.
    pub b_pivot: f64,
    /// Viscous damping at the elbow motor.
    pub b_motor: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        let (l, lc, m) = (0.31, 0.16, 0.63);
        Self {
            l1: l,
            l2: l,
            lc1: lc,
            lc2: lc,
            m1: m,
            m2: m,
            // uniform rod about its centre
            i1: m * l * l / 12.0,
            i2: m * l * l / 12.0,
            g: 9.81,
            b_pivot: 0.044,
            b_motor: 0.06,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("l1", self.l1),
            ("l2", self.l2),
            ("lc1", self.lc1),
            ("lc2", self.lc2),
            ("m1", self.m1),
            ("m2", self.m2),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("i1", self.i1), ("i2", self.i2), ("b_pivot", self.b_pivot), ("b_motor", self.b_motor)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParams(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.lc1 > self.l1 || self.lc2 > self.l2 {
            return Err(Error::InvalidParams("COM offset exceeds link length".into()));
        }
        if !self.g.is_finite() {
            return Err(Error::InvalidParams("g must be finite".into()));
        }
        Ok(())
    }

    /// Same plant without joint damping.
    pub fn undamped(mut self) -> Self {
        self.b_pivot = 0.0;
        self.b_motor = 0.0;
        self
    }

    pub fn with_damping(mut self, b_pivot: f64, b_motor: f64) -> Self {
        self.b_pivot = b_pivot;
        self.b_motor = b_motor;
        self
    }

    /// Lumps a point mass onto link 2 at `distance` from the elbow, updating
    /// its mass, COM offset and COM inertia by parallel-axis composition.
    pub fn with_swing_point_mass(mut self, mass: f64, distance: f64) -> Self {
        let (m, lc, i) = compose_point_mass(self.m2, self.lc2, self.i2, mass, distance);
        self.m2 = m;
        self.lc2 = lc;
        self.i2 = i;
        self
    }

    /// Lumps a point mass onto link 1 at `distance` from the pivot.
    pub fn with_support_point_mass(mut self, mass: f64, distance: f64) -> Self {
        let (m, lc, i) = compose_point_mass(self.m1, self.lc1, self.i1, mass, distance);
        self.m1 = m;
        self.lc1 = lc;
        self.i1 = i;
        self
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let p: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat struct always serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }
}

fn compose_point_mass(m: f64, lc: f64, i: f64, mass: f64, distance: f64) -> (f64, f64, f64) {
    let total = m + mass;
    let lc_new = (m * lc + mass * distance) / total;
    let i_new = i + m * (lc - lc_new).powi(2) + mass * (distance - lc_new).powi(2);
    (total, lc_new, i_new)
}

/// Generalized coordinates and velocities `[q1, q2, qd1, qd2]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub q1: f64,
    pub q2: f64,
    pub qd1: f64,
    pub qd2: f64,
}

impl State {
    pub const fn new(q1: f64, q2: f64, qd1: f64, qd2: f64) -> Self {
        Self { q1, q2, qd1, qd2 }
    }

    pub fn q(&self) -> Vector2<f64> {
        Vector2::new(self.q1, self.q2)
    }

    pub fn qd(&self) -> Vector2<f64> {
        Vector2::new(self.qd1, self.qd2)
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.q1, self.q2, self.qd1, self.qd2)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.q1, self.q2, self.qd1, self.qd2]
    }

    /// Angles wrapped to (-pi, pi]; velocities untouched.
    pub fn wrapped(self) -> Self {
        Self { q1: wrap_angle(self.q1), q2: wrap_angle(self.q2), ..self }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl From<[f64; 4]> for State {
    fn from(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl From<Vector4<f64>> for State {
    fn from(v: Vector4<f64>) -> Self {
        Self::from_vector(&v)
    }
}

impl From<State> for Vector4<f64> {
    fn from(s: State) -> Self {
        s.to_vector()
    }
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

/// Terms of `M(q) qdd + C(q, qd) qd = tau_g(q) + B u`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicsTerms {
    pub mass: Matrix2<f64>,
    /// Christoffel-consistent, so `Mdot - 2C` is skew-symmetric.
    pub coriolis: Matrix2<f64>,
    pub gravity: Vector2<f64>,
    pub actuation: Vector2<f64>,
}

pub fn mass_matrix(p: &ModelParams, q2: f64) -> Matrix2<f64> {
    let c2 = q2.cos();
    let m11 = p.i1 + p.i2 + p.m1 * p.lc1 * p.lc1 + p.m2 * (p.l1 * p.l1 + p.lc2 * p.lc2 + 2.0 * p.l1 * p.lc2 * c2);
    let m12 = p.i2 + p.m2 * (p.lc2 * p.lc2 + p.l1 * p.lc2 * c2);
    let m22 = p.i2 + p.m2 * p.lc2 * p.lc2;
    Matrix2::new(m11, m12, m12, m22)
}

fn gravity_torque(p: &ModelParams, q1: f64, q2: f64) -> Vector2<f64> {
    let s1 = q1.sin();
    let s12 = (q1 + q2).sin();
    Vector2::new(
        -p.m1 * p.g * p.lc1 * s1 - p.m2 * p.g * (p.l1 * s1 + p.lc2 * s12),
        -p.m2 * p.g * p.lc2 * s12,
    )
}

pub fn compute_terms(p: &ModelParams, x: &State) -> DynamicsTerms {
    let h = -p.m2 * p.l1 * p.lc2 * x.q2.sin();
    let coriolis = Matrix2::new(h * x.qd2, h * (x.qd1 + x.qd2), -h * x.qd1, 0.0);
    DynamicsTerms {
        mass: mass_matrix(p, x.q2),
        coriolis,
        gravity: gravity_torque(p, x.q1, x.q2),
        actuation: Vector2::new(0.0, 1.0),
    }
}

fn solve2(m: &Matrix2<f64>, r: &Vector2<f64>) -> Result<Vector2<f64>> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if !(det.is_finite() && det > f64::EPSILON * m.norm_squared()) {
        return Err(Error::SingularMassMatrix);
    }
    Ok(Vector2::new(
        (m[(1, 1)] * r[0] - m[(0, 1)] * r[1]) / det,
        (m[(0, 0)] * r[1] - m[(1, 0)] * r[0]) / det,
    ))
}

/// Joint accelerations including the viscous joint damping.
pub fn forward_dynamics(p: &ModelParams, x: &State, u: f64) -> Result<Vector2<f64>> {
    let t = compute_terms(p, x);
    let damping = Vector2::new(p.b_pivot * x.qd1, p.b_motor * x.qd2);
    let rhs = t.gravity + t.actuation * u - t.coriolis * x.qd() - damping;
    solve2(&t.mass, &rhs)
}

/// First-order form `xdot = f(x, u)`.
pub fn state_derivative(p: &ModelParams, x: &Vector4<f64>, u: f64) -> Result<Vector4<f64>> {
    let s = State::from_vector(x);
    let a = forward_dynamics(p, &s, u)?;
    Ok(Vector4::new(x[2], x[3], a[0], a[1]))
}

/// Positions of the elbow and the swing end-effector in the pivot frame
/// (x forward, y up).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmPoints {
    pub elbow: Vector2<f64>,
    pub end_effector: Vector2<f64>,
}

pub fn forward_kinematics(p: &ModelParams, q1: f64, q2: f64) -> ArmPoints {
    let elbow = Vector2::new(p.l1 * q1.sin(), -p.l1 * q1.cos());
    let a = q1 + q2;
    let end_effector = elbow + Vector2::new(p.l2 * a.sin(), -p.l2 * a.cos());
    ArmPoints { elbow, end_effector }
}

/// Joint angles that put the end-effector at `target`, on the branch with
/// `q2 > 0` when `elbow_positive`. `None` when the target is out of reach.
pub fn inverse_kinematics(p: &ModelParams, target: Vector2<f64>, elbow_positive: bool) -> Option<(f64, f64)> {
    let c2 = (target.norm_squared() - p.l1 * p.l1 - p.l2 * p.l2) / (2.0 * p.l1 * p.l2);
    if !(-1.0..=1.0).contains(&c2) {
        return None;
    }
    let q2 = if elbow_positive { c2.acos() } else { -c2.acos() };
    let q1 = target.x.atan2(-target.y) - (p.l2 * q2.sin()).atan2(p.l1 + p.l2 * q2.cos());
    Some((wrap_angle(q1), q2))
}

/// Jacobian of the end-effector position with respect to `q`.
pub fn end_effector_jacobian(p: &ModelParams, q1: f64, q2: f64) -> Matrix2<f64> {
    let a = q1 + q2;
    let (c1, s1, c12, s12) = (q1.cos(), q1.sin(), a.cos(), a.sin());
    Matrix2::new(
        p.l1 * c1 + p.l2 * c12,
        p.l2 * c12,
        p.l1 * s1 + p.l2 * s12,
        p.l2 * s12,
    )
}

pub fn end_effector_velocity(p: &ModelParams, x: &State) -> Vector2<f64> {
    end_effector_jacobian(p, x.q1, x.q2) * x.qd()
}

/// Kinetic plus potential energy, potential zero at the pivot height.
pub fn total_energy(p: &ModelParams, x: &State) -> f64 {
    let qd = x.qd();
    let kinetic = 0.5 * qd.dot(&(mass_matrix(p, x.q2) * qd));
    let c1 = x.q1.cos();
    let c12 = (x.q1 + x.q2).cos();
    let potential = -p.m1 * p.g * p.lc1 * c1 - p.m2 * p.g * (p.l1 * c1 + p.lc2 * c12);
    kinetic + potential
}

/// Continuous-time Jacobians of `f(x, u)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linearization {
    pub a: Matrix4<f64>,
    pub b: Vector4<f64>,
}

/// Analytic linearization of the damped dynamics.
pub fn linearize(p: &ModelParams, x: &State, u: f64) -> Result<Linearization> {
    let t = compute_terms(p, x);
    let qdd = forward_dynamics(p, x, u)?;
    let minv = t.mass.try_inverse().ok_or(Error::SingularMassMatrix)?;

    let (s2, c2) = x.q2.sin_cos();
    let k = p.m2 * p.l1 * p.lc2;
    let h = -k * s2;
    let dh = -k * c2;
    let (d1, d2) = (x.qd1, x.qd2);

    // d(tau_g)/dq
    let c1 = x.q1.cos();
    let c12 = (x.q1 + x.q2).cos();
    let g22 = -p.m2 * p.g * p.lc2 * c12;
    let dg = Matrix2::new(-p.m1 * p.g * p.lc1 * c1 - p.m2 * p.g * p.l1 * c1 + g22, g22, g22, g22);

    // d(C qd)/dq: only through q2
    let dcq_dq2 = Vector2::new(dh * (2.0 * d1 * d2 + d2 * d2), -dh * d1 * d1);
    // dM/dq2 * qdd
    let dm_dq2 = Matrix2::new(-2.0 * k * s2, -k * s2, -k * s2, 0.0);
    let dm_qdd = dm_dq2 * qdd;

    let mut dr_dq = dg;
    dr_dq[(0, 1)] -= dcq_dq2[0] + dm_qdd[0];
    dr_dq[(1, 1)] -= dcq_dq2[1] + dm_qdd[1];
    let dqdd_dq = minv * dr_dq;

    let dcq_dqd = Matrix2::new(2.0 * h * d2, 2.0 * h * (d1 + d2), -2.0 * h * d1, 0.0);
    let damping = Matrix2::new(p.b_pivot, 0.0, 0.0, p.b_motor);
    let dqdd_dqd = minv * (-dcq_dqd - damping);
    let dqdd_du = minv * t.actuation;

    let mut a = Matrix4::zeros();
    a[(0, 2)] = 1.0;
    a[(1, 3)] = 1.0;
    a.fixed_view_mut::<2, 2>(2, 0).copy_from(&dqdd_dq);
    a.fixed_view_mut::<2, 2>(2, 2).copy_from(&dqdd_dqd);
    let b = Vector4::new(0.0, 0.0, dqdd_du[0], dqdd_du[1]);
    Ok(Linearization { a, b })
}

/// Central-difference linearization; cross-check for [`linearize`].
pub fn linearize_numeric(p: &ModelParams, x: &State, u: f64, step: f64) -> Result<Linearization> {
    let x0 = x.to_vector();
    let mut a = Matrix4::zeros();
    for j in 0..4 {
        let mut xp = x0;
        let mut xm = x0;
        xp[j] += step;
        xm[j] -= step;
        let col = (state_derivative(p, &xp, u)? - state_derivative(p, &xm, u)?) / (2.0 * step);
        a.set_column(j, &col);
    }
    let b = (state_derivative(p, &x0, u + step)? - state_derivative(p, &x0, u - step)?) / (2.0 * step);
    Ok(Linearization { a, b })
}

/// One classic RK4 step with the input held constant.
pub fn rk4_step(p: &ModelParams, x: &Vector4<f64>, u: f64, dt: f64) -> Result<Vector4<f64>> {
    let k1 = state_derivative(p, x, u)?;
    let k2 = state_derivative(p, &(x + k1 * (dt / 2.0)), u)?;
    let k3 = state_derivative(p, &(x + k2 * (dt / 2.0)), u)?;
    let k4 = state_derivative(p, &(x + k3 * dt), u)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// RK4 step with an input that varies over the step (`u0` at the start,
/// `um` at the midpoint, `u1` at the end).
pub fn rk4_step_varying(p: &ModelParams, x: &Vector4<f64>, u0: f64, um: f64, u1: f64, dt: f64) -> Result<Vector4<f64>> {
    let k1 = state_derivative(p, x, u0)?;
    let k2 = state_derivative(p, &(x + k1 * (dt / 2.0)), um)?;
    let k3 = state_derivative(p, &(x + k2 * (dt / 2.0)), um)?;
    let k4 = state_derivative(p, &(x + k3 * dt), u1)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}
