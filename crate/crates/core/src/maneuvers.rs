//! Open-loop release and catch primitives, and the hooked phase of a release.
//!
//! While a release runs, the swing hook still rests on its bar. That phase
//! is modeled as the two-link chain with the swing hand held at bar height
//! (a unilateral normal force) and free to slide along the bar against
//! Coulomb friction. The hand lifts off when the normal force would turn
//! negative; the primitive itself finishes on its own torque/velocity rule.

use nalgebra::{Matrix3, RowVector2, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{compute_terms, inverse_kinematics, state_derivative, ModelParams, State};
use crate::error::{Error, Result};

/// A release that has not finished after this long has failed.
pub const RELEASE_TIMEOUT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReleaseKind {
    /// Let go of the back bar.
    BR,
    /// Let go of the front bar.
    FR,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReleaseSpec {
    pub kind: ReleaseKind,
    /// Piecewise-constant `(torque, minimum duration)` segments; the last one
    /// is held until the exit condition fires.
    pub torque_profile: Vec<(f64, f64)>,
    /// Signed elbow rate at which the release hands over to the swing.
    pub exit_velocity: f64,
    pub x0_expected: State,
    pub sigma0: [f64; 4],
}

impl ReleaseSpec {
    pub fn back() -> Self {
        Self {
            kind: ReleaseKind::BR,
            torque_profile: vec![(2.5, 0.05)],
            exit_velocity: 1.45,
            x0_expected: State::new(-0.63, -1.87, -0.63, 1.45),
            sigma0: [0.03, 0.03, 0.08, 0.11],
        }
    }

    pub fn front() -> Self {
        Self {
            kind: ReleaseKind::FR,
            torque_profile: vec![(-3.0, 0.05), (2.0, 0.0)],
            exit_velocity: FR_EXIT_VELOCITY,
            x0_expected: State::new(0.51, 2.21, -0.63, 4.68),
            sigma0: [0.03, 0.002, 0.42, 0.72],
        }
    }

    pub fn for_kind(kind: ReleaseKind) -> Self {
        match kind {
            ReleaseKind::BR => Self::back(),
            ReleaseKind::FR => Self::front(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.torque_profile.is_empty() || self.torque_profile.iter().any(|(u, d)| !u.is_finite() || !(*d >= 0.0)) {
            return Err(Error::InvalidController("release profile needs segments with non-negative durations".into()));
        }
        if !(self.exit_velocity.is_finite() && self.exit_velocity != 0.0) {
            return Err(Error::InvalidController("release exit velocity must be nonzero".into()));
        }
        Ok(())
    }

    fn min_duration(&self) -> f64 {
        self.torque_profile.iter().map(|(_, d)| d).sum()
    }
}

/// Elbow rate that ends a front release: the mean rate of the expected
/// handoff. Reaching it while hooked needs the +2 N·m sustained torque.
const FR_EXIT_VELOCITY: f64 = 4.68;

/// Torque of the active profile segment and whether the release is done.
pub fn release_controller(spec: &ReleaseSpec, x: &State, t_since_start: f64) -> (f64, bool) {
    let mut start = 0.0;
    let mut torque = spec.torque_profile[spec.torque_profile.len() - 1].0;
    for &(u, d) in &spec.torque_profile {
        if t_since_start < start + d {
            torque = u;
            break;
        }
        start += d;
    }
    let fast_enough = x.qd2 * spec.exit_velocity.signum() >= spec.exit_velocity.abs();
    (torque, t_since_start >= spec.min_duration() && fast_enough)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CatchSpec {
    pub torque: f64,
    pub duration: f64,
    pub idle_before: f64,
}

impl Default for CatchSpec {
    fn default() -> Self {
        Self { torque: -0.8, duration: 0.1, idle_before: 0.1 }
    }
}

impl CatchSpec {
    /// Catch on the back bar: the seating torque pulls the other way.
    pub fn back() -> Self {
        Self { torque: 0.8, ..Self::default() }
    }

    pub fn total(&self) -> f64 {
        self.idle_before + self.duration
    }
}

pub fn catch_controller(spec: &CatchSpec, t_since_start: f64) -> (f64, bool) {
    if t_since_start < spec.idle_before {
        (0.0, false)
    } else if t_since_start < spec.total() {
        (spec.torque, false)
    } else {
        (0.0, true)
    }
}

/// Double-support rest pose with the support hook at the origin and the
/// swing hook on the bar at `bar`. The elbow bends down between the bars.
pub fn double_support_pose(params: &ModelParams, bar: Vector2<f64>) -> Option<State> {
    // hanging below the bars, the elbow bends toward the swing bar
    let (q1, q2) = inverse_kinematics(params, bar, bar.x > 0.0)?;
    Some(State::new(q1, q2, 0.0, 0.0))
}

/// Contact model of the hooked phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HookContact {
    /// Coulomb friction between the swing hook and its bar.
    pub friction: f64,
    /// Velocity scale of the smoothed sign in the friction law (m/s).
    pub slip_scale: f64,
    pub dt: f64,
}

impl Default for HookContact {
    fn default() -> Self {
        Self { friction: 0.8, slip_scale: 1e-3, dt: 1e-4 }
    }
}

/// Accelerations with the swing hand held at bar height, and the normal force.
fn hooked_dynamics(p: &ModelParams, contact: &HookContact, x: &State, u: f64) -> Result<(Vector2<f64>, f64)> {
    let t = compute_terms(p, x);
    let damping = Vector2::new(p.b_pivot * x.qd1, p.b_motor * x.qd2);
    let rhs = t.gravity + t.actuation * u - t.coriolis * x.qd() - damping;
    let a = x.q1 + x.q2;
    let (s1, c1, s12, c12) = (x.q1.sin(), x.q1.cos(), a.sin(), a.cos());
    let jy = RowVector2::new(p.l1 * s1 + p.l2 * s12, p.l2 * s12);
    let jx = RowVector2::new(p.l1 * c1 + p.l2 * c12, p.l2 * c12);
    let w = x.qd1 + x.qd2;
    let jy_dot_qd = p.l1 * c1 * x.qd1 * x.qd1 + p.l2 * c12 * w * w;
    let slip = (jx * x.qd())[0];
    let sgn = (slip / contact.slip_scale).tanh();
    let force_dir = jy - jx * (contact.friction * sgn);
    // [M, -force_dirᵀ; jy, 0] [qdd; λ] = [rhs; -jy_dot_qd]
    let k = Matrix3::new(
        t.mass[(0, 0)], t.mass[(0, 1)], -force_dir[0],
        t.mass[(1, 0)], t.mass[(1, 1)], -force_dir[1],
        jy[0], jy[1], 0.0,
    );
    let sol = k.lu().solve(&Vector3::new(rhs[0], rhs[1], -jy_dot_qd)).ok_or(Error::SingularMassMatrix)?;
    Ok((Vector2::new(sol[0], sol[1]), sol[2]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReleaseOutcome {
    /// State at the moment the release hands over to the swing.
    pub handoff: State,
    pub duration: f64,
    /// `(t, state, torque)` every integration step.
    pub trace: Vec<(f64, State, f64)>,
    /// Absolute mechanical work of the elbow motor.
    pub energy: f64,
}

/// Runs a release from `x_start` (normally a double-support rest pose).
pub fn simulate_release(
    params: &ModelParams,
    spec: &ReleaseSpec,
    contact: &HookContact,
    x_start: &State,
) -> Result<ReleaseOutcome> {
    spec.validate()?;
    let dt = contact.dt;
    let mut x = x_start.to_vector();
    let mut hooked = true;
    let mut trace = vec![(0.0, *x_start, spec.torque_profile[0].0)];
    let mut energy = 0.0;
    let steps = (RELEASE_TIMEOUT / dt).round() as usize;
    for i in 0..steps {
        let t = i as f64 * dt;
        let (u, done) = release_controller(spec, &State::from_vector(&x), t);
        if done {
            return Ok(ReleaseOutcome { handoff: State::from_vector(&x), duration: t, trace, energy });
        }
        let f = |v: &Vector4<f64>| -> Result<(Vector4<f64>, f64)> {
            if hooked {
                let (qdd, normal) = hooked_dynamics(params, contact, &State::from_vector(v), u)?;
                Ok((Vector4::new(v[2], v[3], qdd[0], qdd[1]), normal))
            } else {
                Ok((state_derivative(params, v, u)?, 0.0))
            }
        };
        let (k1, normal) = f(&x)?;
        if hooked && normal <= 0.0 {
            hooked = false;
            continue_free(&mut x, params, u, dt, &mut energy)?;
        } else {
            let (k2, _) = f(&(x + k1 * (dt / 2.0)))?;
            let (k3, _) = f(&(x + k2 * (dt / 2.0)))?;
            let (k4, _) = f(&(x + k3 * dt))?;
            let next = x + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0);
            energy += (u * 0.5 * (x[3] + next[3])).abs() * dt;
            x = next;
        }
        trace.push((t + dt, State::from_vector(&x), u));
    }
    Err(Error::ReleaseTimeout(RELEASE_TIMEOUT))
}

fn continue_free(x: &mut Vector4<f64>, params: &ModelParams, u: f64, dt: f64, energy: &mut f64) -> Result<()> {
    let next = crate::dynamics::rk4_step(params, x, u, dt)?;
    *energy += (u * 0.5 * (x[3] + next[3])).abs() * dt;
    *x = next;
    Ok(())
}
