//! Time-varying LQR along a nominal trajectory.
//!
//! The cost-to-go `S(t)` solves the differential Riccati equation
//! `-Ṡ = AᵀS + SA - S B R⁻¹ Bᵀ S + Q` backward from `S(T) = Q_f`, with
//! `(A, B)` the linearization of the damped plant along the nominal. The
//! feedback is `u = u*(t) - K(t)(x - x*(t))`, `K = R⁻¹ Bᵀ S`.

use std::io::Write;

use nalgebra::{Matrix4, RowVector4, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{linearize, ModelParams, State, MOTOR_TORQUE_LIMIT};
use crate::error::{Error, Result};
use crate::trajectory::{fmt_sig9, Trajectory};

/// Half-width of the time window searched for the closest nominal state.
pub const SEARCH_WINDOW: f64 = 0.1;

const BLOWUP: f64 = 1e9;
/// Largest `h·λ` allowed per RK4 substep, `λ` a bound on the Riccati
/// Jacobian's spectral radius.
const STIFF_STEP: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TvlqrConfig {
    /// Running state cost, row-major.
    pub q: [[f64; 4]; 4],
    /// Terminal cost, row-major.
    pub qf: [[f64; 4]; 4],
    pub r: f64,
    /// Riccati integration step (s).
    pub dt_ric: f64,
}

fn diag(d: [f64; 4]) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        m[i][i] = d[i];
    }
    m
}

impl Default for TvlqrConfig {
    fn default() -> Self {
        Self {
            q: diag([0.01, 5.0, 0.01, 0.1]),
            qf: diag([0.04, 20.0, 0.04, 0.4]),
            r: 5.0,
            dt_ric: 1e-3,
        }
    }
}

fn psd(m: &Matrix4<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 && m.symmetric_eigenvalues().min() >= -1e-12
}

impl TvlqrConfig {
    pub fn q_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.q[i][j])
    }

    pub fn qf_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.qf[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        if !psd(&self.q_matrix()) || !psd(&self.qf_matrix()) {
            return Err(Error::InvalidController("Q and Qf must be symmetric positive semidefinite".into()));
        }
        if !(self.r > 0.0) || !(self.dt_ric > 0.0) {
            return Err(Error::InvalidController("R and dt_ric must be positive".into()));
        }
        Ok(())
    }

    /// The same config with every cost multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let scale = |m: [[f64; 4]; 4]| m.map(|row| row.map(|v| v * k));
        Self { q: scale(self.q), qf: scale(self.qf), r: self.r * k, dt_ric: self.dt_ric }
    }
}

/// Gains and cost-to-go on a uniform grid over `[0, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GainSchedule {
    times: Vec<f64>,
    k: Vec<RowVector4<f64>>,
    s: Vec<Matrix4<f64>>,
}

impl GainSchedule {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn gains(&self) -> &[RowVector4<f64>] {
        &self.k
    }

    pub fn cost_to_go(&self) -> &[Matrix4<f64>] {
        &self.s
    }

    pub fn duration(&self) -> f64 {
        *self.times.last().expect("schedule is never empty")
    }

    fn bracket(&self, t: f64) -> (usize, f64) {
        let last = self.times.len() - 1;
        let dt = self.duration() / last as f64;
        let pos = (t / dt).clamp(0.0, last as f64);
        let i = (pos.floor() as usize).min(last - 1);
        (i, pos - i as f64)
    }

    /// Linearly interpolated gain, clamped to the horizon.
    pub fn gain_at(&self, t: f64) -> RowVector4<f64> {
        let (i, s) = self.bracket(t);
        self.k[i] * (1.0 - s) + self.k[i + 1] * s
    }

    pub fn cost_to_go_at(&self, t: f64) -> Matrix4<f64> {
        let (i, s) = self.bracket(t);
        self.s[i] * (1.0 - s) + self.s[i + 1] * s
    }

    /// CSV with header `t,k1,k2,k3,k4`, one row per grid point.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,k1,k2,k3,k4")?;
        for (t, k) in self.times.iter().zip(&self.k) {
            writeln!(w, "{},{},{},{},{}", fmt_sig9(*t), fmt_sig9(k[0]), fmt_sig9(k[1]), fmt_sig9(k[2]), fmt_sig9(k[3]))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii output")
    }
}

/// Integrates the Riccati equation backward along `nominal` with RK4.
///
/// The grid step is the largest step no bigger than `dt_ric` that divides
/// the horizon evenly; steps are subdivided where the equation is stiff.
pub fn synthesize(params: &ModelParams, nominal: &Trajectory, config: &TvlqrConfig) -> Result<GainSchedule> {
    config.validate()?;
    let horizon = nominal.duration();
    if config.dt_ric > horizon / 50.0 {
        return Err(Error::InvalidController(format!(
            "dt_ric {} is too coarse for a {horizon} s horizon",
            config.dt_ric
        )));
    }
    let q = config.q_matrix();
    let r_inv = 1.0 / config.r;
    let steps = (horizon / config.dt_ric).ceil() as usize;
    let dt = horizon / steps as f64;

    let model = |t: f64| -> Result<(Matrix4<f64>, Vector4<f64>)> {
        let l = linearize(params, &nominal.state_at(t), nominal.input_at(t))?;
        Ok((l.a, l.b))
    };
    // dS/dτ in reversed time τ = T - t
    let rhs = |s: &Matrix4<f64>, (a, b): &(Matrix4<f64>, Vector4<f64>)| {
        let sb = s * b;
        a.transpose() * s + s * a - sb * sb.transpose() * r_inv + q
    };
    let gain = |s: &Matrix4<f64>, b: &Vector4<f64>| (s * b).transpose() * r_inv;

    let mut s = config.qf_matrix();
    let mut hi = model(horizon)?;
    let mut times = vec![horizon];
    let mut k = vec![gain(&s, &hi.1)];
    let mut ss = vec![s];
    for i in (0..steps).rev() {
        let t = i as f64 * dt;
        // The quadratic term makes the equation stiff while S is large, so
        // each grid step is split until RK4 is well inside its stability
        // region.
        let (a, b) = &hi;
        let rate = 2.0 * a.norm() + 2.0 * (s * b).norm() * b.norm() * r_inv;
        let sub = ((dt * rate / STIFF_STEP).ceil() as usize).max(1);
        let h = dt / sub as f64;
        let mut top = hi;
        for j in (0..sub).rev() {
            let tj = t + j as f64 * h;
            let mid = model(tj + 0.5 * h)?;
            let bottom = model(tj)?;
            let k1 = rhs(&s, &top);
            let k2 = rhs(&(s + k1 * (0.5 * h)), &mid);
            let k3 = rhs(&(s + k2 * (0.5 * h)), &mid);
            let k4 = rhs(&(s + k3 * h), &bottom);
            s += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
            s = (s + s.transpose()) * 0.5;
            top = bottom;
        }
        if !(s.amax() <= BLOWUP) {
            return Err(Error::RiccatiBlowup { time: t });
        }
        times.push(t);
        k.push(gain(&s, &top.1));
        ss.push(s);
        hi = top;
    }
    times.reverse();
    k.reverse();
    ss.reverse();
    Ok(GainSchedule { times, k, s: ss })
}

/// Nominal time whose state is closest to `x`, searched on the gain grid
/// within `SEARCH_WINDOW` of `t_hint` but never before `not_before`.
pub fn nearest_time(gain: &GainSchedule, nominal: &Trajectory, x: &State, t_hint: f64, not_before: f64) -> f64 {
    let horizon = gain.duration().min(nominal.duration());
    let lo = (t_hint - SEARCH_WINDOW).max(not_before).clamp(0.0, horizon);
    let hi = (t_hint + SEARCH_WINDOW).clamp(lo, horizon);
    let dt = gain.duration() / (gain.times.len() - 1) as f64;
    let n = ((hi - lo) / dt).ceil() as usize;
    let xv = x.to_vector();
    let mut best = (f64::INFINITY, lo);
    for i in 0..=n {
        let t = (lo + i as f64 * dt).min(hi);
        let d = (nominal.state_at(t).to_vector() - xv).norm_squared();
        if d < best.0 {
            best = (d, t);
        }
    }
    best.1
}

/// Feedback law evaluated at nominal time `t`, clamped to the motor limit.
pub fn feedback(gain: &GainSchedule, nominal: &Trajectory, x: &State, t: f64) -> f64 {
    let err = x.to_vector() - nominal.state_at(t).to_vector();
    let u = nominal.input_at(t) - (gain.gain_at(t) * err)[0];
    u.clamp(-MOTOR_TORQUE_LIMIT, MOTOR_TORQUE_LIMIT)
}

/// Stateless control: closest nominal point near `t_hint`, then the
/// feedback law there.
pub fn control(gain: &GainSchedule, nominal: &Trajectory, x: &State, t_hint: f64) -> f64 {
    let t = nearest_time(gain, nominal, x, t_hint, 0.0);
    feedback(gain, nominal, x, t)
}

/// Stateful tracker whose nominal time never moves backward, so a looping
/// nominal cannot make it jump to an earlier pass.
#[derive(Clone, Debug)]
pub struct TvlqrTracker<'a> {
    gain: &'a GainSchedule,
    nominal: &'a Trajectory,
    progress: f64,
}

impl<'a> TvlqrTracker<'a> {
    pub fn new(gain: &'a GainSchedule, nominal: &'a Trajectory) -> Self {
        Self { gain, nominal, progress: 0.0 }
    }

    /// Nominal time matched on the last call.
    pub fn progress(&self) -> f64 {
        self.progress
    }

    pub fn torque(&mut self, x: &State, t_hint: f64) -> f64 {
        self.progress = nearest_time(self.gain, self.nominal, x, t_hint, self.progress);
        feedback(self.gain, self.nominal, x, self.progress)
    }
}
