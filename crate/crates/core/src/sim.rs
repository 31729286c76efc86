//! Fixed-step rollouts with grasp/collision events, disturbances and the
//! controller metric suite.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{forward_kinematics, rk4_step, ModelParams, State, MOTOR_TORQUE_LIMIT};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::pd::{pd_control, PdGains};
use crate::statemachine::Primitive;
use crate::trajectory::{fmt_sig9, Trajectory};
use crate::trajopt::WorldGeometry;
use crate::tvlqr::{GainSchedule, TvlqrTracker};

/// Any state component beyond this means the integration has blown up.
pub const DIVERGENCE_BOUND: f64 = 1e3;

pub const TRACE_HEADER: &str = "t,q1,q2,qd1,qd2,u,E_cum,primitive";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    /// Integrator step (s).
    pub dt: f64,
    /// Rate of the zero-order-hold control updates (Hz).
    pub control_rate: f64,
    pub torque_clamp: f64,
    /// Detect grasps and collisions and stop on them.
    pub events: bool,
    /// Radius around the target bar inside which the hook seats.
    pub r_roa: f64,
    /// How long a swing may run past its nominal before it counts as missed.
    pub overtime: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { dt: 1e-3, control_rate: 250.0, torque_clamp: MOTOR_TORQUE_LIMIT, events: true, r_roa: 0.05, overtime: 0.5 }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dt > 0.0
            && self.control_rate > 0.0
            && self.dt <= 0.5 / self.control_rate
            && self.torque_clamp > 0.0
            && self.r_roa > 0.0
            && self.overtime >= 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "invalid rollout config (need dt <= 1/(2·rate), positive clamp and radii): {self:?}"
            )));
        }
        Ok(())
    }
}

/// Which physical role a lumped mass is attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmRole {
    Swing,
    Support,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Disturbance {
    /// Point mass on an arm, `distance` from that arm's proximal joint
    /// (the hook end of the swing arm when absent).
    AddedMass { mass: f64, arm: ArmRole, distance: Option<f64> },
    /// Step change of a joint rate. Without a time it fires when the
    /// shoulder angle first crosses zero, the bottom of the swing.
    VelocityImpulse { joint: usize, delta: f64, time: Option<f64> },
}

impl Disturbance {
    /// The cardboard-box knock: −1 rad/s on the shoulder at the bottom of the swing.
    pub fn standard_impulse() -> Self {
        Disturbance::VelocityImpulse { joint: 0, delta: -1.0, time: None }
    }

    pub fn swing_mass(mass: f64) -> Self {
        Disturbance::AddedMass { mass, arm: ArmRole::Swing, distance: None }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Disturbance::AddedMass { mass, distance, .. } if mass >= 0.0 && distance.is_none_or(|d| d >= 0.0) => Ok(()),
            Disturbance::VelocityImpulse { joint, delta, time } if joint < 2 && delta.is_finite() && time.is_none_or(|t| t >= 0.0) => {
                Ok(())
            }
            _ => Err(Error::Config(format!("invalid disturbance {self:?}"))),
        }
    }
}

/// Plant with every added mass of `disturbances` lumped on.
pub fn disturbed_params(params: &ModelParams, disturbances: &[Disturbance]) -> ModelParams {
    let mut p = *params;
    for d in disturbances {
        if let Disturbance::AddedMass { mass, arm, distance } = *d {
            p = match arm {
                ArmRole::Swing => p.with_swing_point_mass(mass, distance.unwrap_or(params.l2)),
                ArmRole::Support => p.with_support_point_mass(mass, distance.unwrap_or(params.l1)),
            };
        }
    }
    p
}

/// Feedback law driven by the rollout at its control rate.
pub trait Controller {
    fn name(&self) -> &str;
    /// Torque for the measured state `x` at time `t` since the swing began.
    fn torque(&mut self, x: &State, t: f64) -> f64;
    /// The trajectory the controller tracks, if any.
    fn nominal(&self) -> Option<&Trajectory> {
        None
    }
    /// Preferred update rate; the rollout's configured rate otherwise.
    fn rate(&self) -> Option<f64> {
        None
    }
}

/// Replays the nominal input without feedback.
pub struct OpenLoop<'a>(pub &'a Trajectory);

impl Controller for OpenLoop<'_> {
    fn name(&self) -> &str {
        "open-loop"
    }
    fn torque(&mut self, _x: &State, t: f64) -> f64 {
        self.0.input_at(t)
    }
    fn nominal(&self) -> Option<&Trajectory> {
        Some(self.0)
    }
}

pub struct ZeroTorque;

impl Controller for ZeroTorque {
    fn name(&self) -> &str {
        "zero"
    }
    fn torque(&mut self, _x: &State, _t: f64) -> f64 {
        0.0
    }
}

pub struct PdController<'a> {
    pub nominal: &'a Trajectory,
    pub gains: PdGains,
}

impl Controller for PdController<'_> {
    fn name(&self) -> &str {
        "PD"
    }
    fn torque(&mut self, x: &State, t: f64) -> f64 {
        pd_control(&self.gains, self.nominal, x, t)
    }
    fn nominal(&self) -> Option<&Trajectory> {
        Some(self.nominal)
    }
    fn rate(&self) -> Option<f64> {
        Some(self.gains.rate)
    }
}

pub struct TvlqrController<'a> {
    tracker: TvlqrTracker<'a>,
    nominal: &'a Trajectory,
}

impl<'a> TvlqrController<'a> {
    pub fn new(gains: &'a GainSchedule, nominal: &'a Trajectory) -> Self {
        Self { tracker: TvlqrTracker::new(gains, nominal), nominal }
    }
}

impl Controller for TvlqrController<'_> {
    fn name(&self) -> &str {
        "TVLQR"
    }
    fn torque(&mut self, x: &State, t: f64) -> f64 {
        self.tracker.torque(x, t)
    }
    fn nominal(&self) -> Option<&Trajectory> {
        Some(self.nominal)
    }
}

/// Where a swing is supposed to end.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Goal {
    /// No target: run for a fixed time with events off.
    Free { duration: f64 },
    /// Hook the bar at `bar`, arriving on the side `approach` points to.
    Bar { bar: Vector2<f64>, approach: Vector2<f64>, deadline: f64 },
}

impl Goal {
    /// Front bar from above.
    pub fn front(world: &WorldGeometry, deadline: f64) -> Self {
        Goal::Bar { bar: world.front_bar(), approach: Vector2::new(-1.7, 1.0), deadline }
    }

    /// Back bar from below.
    pub fn back(world: &WorldGeometry, deadline: f64) -> Self {
        Goal::Bar { bar: world.back_bar(), approach: Vector2::new(1.7, -1.0), deadline }
    }

    fn horizon(&self) -> f64 {
        match *self {
            Goal::Free { duration } => duration,
            Goal::Bar { deadline, .. } => deadline,
        }
    }
}

/// Bars the hook can run into, in the support-pivot frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Obstacles {
    pub bars: Vec<Vector2<f64>>,
    pub r_bar: f64,
}

impl Obstacles {
    /// All three bars around the pivot.
    pub fn around(world: &WorldGeometry) -> Self {
        Self { bars: vec![world.back_bar(), Vector2::zeros(), world.front_bar()], r_bar: world.r_bar }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Grasped,
    Collided,
    TimedOut,
    /// Free rollout that ran its full duration.
    Completed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub x: State,
    pub u: f64,
    pub energy: f64,
    pub primitive: Primitive,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn last_state(&self) -> Option<State> {
        self.rows.last().map(|r| r.x)
    }

    pub fn energy(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.energy)
    }

    pub fn duration(&self) -> f64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// Appends `other` shifted to start where this trace ends, with its
    /// cumulative energy offset accordingly. The first row of `other`
    /// duplicates this trace's last instant and is dropped.
    pub fn extend_from(&mut self, other: &Trace) {
        let (t0, e0) = self.rows.last().map_or((0.0, 0.0), |r| (r.t, r.energy));
        let skip = usize::from(!self.rows.is_empty());
        self.rows.extend(other.rows.iter().skip(skip).map(|r| TraceRow { t: r.t + t0, energy: r.energy + e0, ..*r }));
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                fmt_sig9(r.t),
                fmt_sig9(r.x.q1),
                fmt_sig9(r.x.q2),
                fmt_sig9(r.x.qd1),
                fmt_sig9(r.x.qd2),
                fmt_sig9(r.u),
                fmt_sig9(r.energy),
                r.primitive
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii output")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub max_abs_torque: f64,
    /// Elbow angle error against the nominal.
    pub rms_pos_error: Option<f64>,
    pub rms_vel_error: Option<f64>,
    pub rms_torque_error: Option<f64>,
    pub energy: f64,
    pub duration: f64,
    pub success: bool,
}

impl MetricsReport {
    pub fn empty() -> Self {
        Self {
            max_abs_torque: 0.0,
            rms_pos_error: None,
            rms_vel_error: None,
            rms_torque_error: None,
            energy: 0.0,
            duration: 0.0,
            success: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub trace: Trace,
    pub metrics: MetricsReport,
    pub outcome: Outcome,
}

impl Rollout {
    pub fn final_state(&self) -> State {
        self.trace.last_state().expect("a rollout always logs its initial state")
    }
}

/// Simulates `controller` from `x0` until the goal resolves.
pub fn rollout(
    params: &ModelParams,
    controller: &mut dyn Controller,
    x0: &State,
    goal: &Goal,
    obstacles: &Obstacles,
    config: &RolloutConfig,
    disturbances: &[Disturbance],
    label: Primitive,
) -> Result<Rollout> {
    config.validate()?;
    for d in disturbances {
        d.validate()?;
    }
    let p = disturbed_params(params, disturbances);
    p.validate()?;
    let mut impulses: Vec<(usize, f64, Option<f64>)> = disturbances
        .iter()
        .filter_map(|d| match *d {
            Disturbance::VelocityImpulse { joint, delta, time } => Some((joint, delta, time)),
            Disturbance::AddedMass { .. } => None,
        })
        .collect();

    let dt = config.dt;
    let rate = controller.rate().unwrap_or(config.control_rate);
    if !(rate > 0.0 && dt <= 0.5 / rate) {
        return Err(Error::Config(format!("control rate {rate} Hz needs an integrator step of at most {}", 0.5 / rate)));
    }
    let period = 1.0 / rate;
    let steps = (goal.horizon() / dt).round() as usize;
    let events = config.events && matches!(goal, Goal::Bar { .. });
    // a bar the hook starts on is not an obstacle until the hook has left it
    let ee0 = forward_kinematics(&p, x0.q1, x0.q2).end_effector;
    let mut cleared: Vec<bool> = obstacles.bars.iter().map(|b| (ee0 - b).norm() > obstacles.r_bar).collect();

    let mut x = x0.to_vector();
    let mut u = 0.0;
    let mut next_tick = 0usize;
    let mut energy = 0.0;
    let mut rows = Vec::with_capacity(steps + 1);
    let mut outcome = if events { Outcome::TimedOut } else { Outcome::Completed };
    for i in 0..=steps {
        let t = i as f64 * dt;
        let state = State::from_vector(&x);
        if i == next_tick_step(next_tick, period, dt) {
            u = controller.torque(&state, t).clamp(-config.torque_clamp, config.torque_clamp);
            next_tick += 1;
        }
        rows.push(TraceRow { t, x: state, u, energy, primitive: label });

        if events {
            let ee = forward_kinematics(&p, state.q1, state.q2).end_effector;
            if let Goal::Bar { bar, approach, .. } = *goal {
                let rel = ee - bar;
                if rel.norm() <= config.r_roa && rel.dot(&approach) > 0.0 {
                    outcome = Outcome::Grasped;
                    break;
                }
            }
            let mut hit = false;
            for (b, clear) in obstacles.bars.iter().zip(cleared.iter_mut()) {
                let inside = (ee - b).norm() <= obstacles.r_bar;
                if !inside {
                    *clear = true;
                } else if *clear {
                    hit = true;
                }
            }
            if hit {
                outcome = Outcome::Collided;
                break;
            }
        }
        if i == steps {
            break;
        }

        for imp in impulses.iter_mut() {
            let due = match imp.2 {
                Some(at) => t >= at,
                None => i > 0 && rows[i - 1].x.q1 * state.q1 <= 0.0 && rows[i - 1].x.q1 != state.q1,
            };
            if due && imp.1 != 0.0 {
                x[2 + imp.0] += imp.1;
                imp.1 = 0.0;
            }
        }
        energy += (u * x[3]).abs() * dt;
        x = rk4_step(&p, &x, u, dt)?;
        if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
            return Err(Error::NumericalDivergence { time: t + dt });
        }
    }
    let trace = Trace { rows };
    let metrics = metrics(&trace, controller.nominal(), outcome);
    Ok(Rollout { trace, metrics, outcome })
}

/// Step index of control tick `k`; ticks land on the first integrator step
/// at or after `k / rate`.
fn next_tick_step(k: usize, period: f64, dt: f64) -> usize {
    ((k as f64 * period) / dt - 1e-9).ceil() as usize
}

/// Metrics of a logged swing against an optional nominal.
pub fn metrics(trace: &Trace, nominal: Option<&Trajectory>, outcome: Outcome) -> MetricsReport {
    let max_abs_torque = trace.rows.iter().fold(0.0f64, |m, r| m.max(r.u.abs()));
    let (mut pos, mut vel, mut tau) = (0.0, 0.0, 0.0);
    if let Some(nom) = nominal {
        for r in &trace.rows {
            let reference = nom.state_at(r.t);
            pos += (r.x.q2 - reference.q2).powi(2);
            vel += (r.x.qd2 - reference.qd2).powi(2);
            tau += (r.u - nom.input_at(r.t)).powi(2);
        }
    }
    let n = trace.rows.len().max(1) as f64;
    let rms = |s: f64| nominal.map(|_| (s / n).sqrt());
    MetricsReport {
        max_abs_torque,
        rms_pos_error: rms(pos),
        rms_vel_error: rms(vel),
        rms_torque_error: rms(tau),
        energy: trace.energy(),
        duration: trace.duration(),
        success: matches!(outcome, Outcome::Grasped | Outcome::Completed),
    }
}

/// Initial state drawn componentwise from `N(mean, sigma)`.
pub fn perturbed_start(mean: &State, sigma: &[f64; 4], rng: &mut ChaCha8Rng) -> State {
    let m = mean.to_array();
    let mut out = [0.0; 4];
    for j in 0..4 {
        out[j] = if sigma[j] > 0.0 {
            Normal::new(m[j], sigma[j]).expect("positive sigma").sample(rng)
        } else {
            m[j]
        };
    }
    State::from(out)
}

/// Per-repetition generator: each repetition gets its own stream so results
/// do not depend on scheduling.
pub fn repetition_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64 + 1);
    rng
}

/// Builds a fresh controller for one repetition.
pub type ControllerFactory<'a> = dyn Fn() -> Box<dyn Controller + 'a> + Sync + 'a;

pub struct Contender<'a> {
    pub name: String,
    pub make: Box<ControllerFactory<'a>>,
}

/// One swing, repeated from perturbed starts.
#[derive(Clone, Debug)]
pub struct SwingTrial {
    pub params: ModelParams,
    pub x0: State,
    pub sigma0: [f64; 4],
    pub goal: Goal,
    pub obstacles: Obstacles,
    pub config: RolloutConfig,
    pub disturbances: Vec<Disturbance>,
    pub label: Primitive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub controller: String,
    pub repetitions: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Means over all repetitions.
    pub mean: MetricsReport,
    /// Rollouts that failed numerically count as misses.
    pub diverged: usize,
}

/// Every contender on the same seeded starts.
pub fn compare_controllers(
    trial: &SwingTrial,
    contenders: &[Contender<'_>],
    repetitions: usize,
    seed: u64,
    exec: Execution,
) -> Vec<ComparisonRow> {
    if repetitions == 0 {
        return Vec::new();
    }
    contenders
        .iter()
        .map(|c| {
            let runs = par::map_indices(exec, repetitions, |rep| {
                let x0 = perturbed_start(&trial.x0, &trial.sigma0, &mut repetition_rng(seed, rep));
                let mut ctrl = (c.make)();
                rollout(
                    &trial.params,
                    ctrl.as_mut(),
                    &x0,
                    &trial.goal,
                    &trial.obstacles,
                    &trial.config,
                    &trial.disturbances,
                    trial.label,
                )
                .ok()
                .map(|r| r.metrics)
            });
            summarize(&c.name, &runs)
        })
        .collect()
}

/// Aggregates per-repetition metrics; `None` marks a diverged rollout.
pub fn summarize(name: &str, runs: &[Option<MetricsReport>]) -> ComparisonRow {
    let done: Vec<&MetricsReport> = runs.iter().flatten().collect();
    let n = done.len().max(1) as f64;
    let mean_of = |f: &dyn Fn(&MetricsReport) -> f64| done.iter().map(|m| f(m)).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
        let v: Vec<f64> = done.iter().filter_map(|m| f(m)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let successes = done.iter().filter(|m| m.success).count();
    ComparisonRow {
        controller: name.to_string(),
        repetitions: runs.len(),
        successes,
        success_rate: if runs.is_empty() { 0.0 } else { successes as f64 / runs.len() as f64 },
        mean: MetricsReport {
            max_abs_torque: mean_of(&|m| m.max_abs_torque),
            rms_pos_error: mean_opt(&|m| m.rms_pos_error),
            rms_vel_error: mean_opt(&|m| m.rms_vel_error),
            rms_torque_error: mean_opt(&|m| m.rms_torque_error),
            energy: mean_of(&|m| m.energy),
            duration: mean_of(&|m| m.duration),
            success: successes == runs.len(),
        },
        diverged: runs.len() - done.len(),
    }
}

pub const METRICS_HEADER: &str =
    "controller,repetitions,successes,success_rate,max_abs_torque,rms_pos_error,rms_vel_error,rms_torque_error,energy,duration,diverged";

pub fn metrics_csv(rows: &[ComparisonRow]) -> String {
    let opt = |v: Option<f64>| v.map(fmt_sig9).unwrap_or_default();
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let m = &r.mean;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.controller,
            r.repetitions,
            r.successes,
            fmt_sig9(r.success_rate),
            fmt_sig9(m.max_abs_torque),
            opt(m.rms_pos_error),
            opt(m.rms_vel_error),
            opt(m.rms_torque_error),
            fmt_sig9(m.energy),
            fmt_sig9(m.duration),
            r.diverged
        );
    }
    s
}

/// Table with one column per controller and one row per metric.
pub fn metrics_table(rows: &[ComparisonRow]) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
    let lines: [(&str, Box<dyn Fn(&ComparisonRow) -> String>); 7] = [
        ("Max torque (N·m)", Box::new(|r| format!("{:.3}", r.mean.max_abs_torque))),
        ("RMS pos error (rad)", Box::new(move |r| opt(r.mean.rms_pos_error))),
        ("RMS vel error (rad/s)", Box::new(move |r| opt(r.mean.rms_vel_error))),
        ("RMS torque error (N·m)", Box::new(move |r| opt(r.mean.rms_torque_error))),
        ("Energy (J)", Box::new(|r| format!("{:.3}", r.mean.energy))),
        ("Duration (s)", Box::new(|r| format!("{:.3}", r.mean.duration))),
        ("Success (%)", Box::new(|r| format!("{:.0}", 100.0 * r.success_rate))),
    ];
    let label_w = lines.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0);
    let cells: Vec<Vec<String>> = lines.iter().map(|(_, f)| rows.iter().map(f).collect()).collect();
    let col_w: Vec<usize> = rows
        .iter()
        .enumerate()
        .map(|(j, r)| cells.iter().map(|c| c[j].len()).chain([r.controller.len()]).max().unwrap_or(0))
        .collect();
    let mut s = format!("{:label_w$}", "Metric");
    for (r, w) in rows.iter().zip(&col_w) {
        let _ = write!(s, "  {:>w$}", r.controller);
    }
    s.push('\n');
    for ((label, _), c) in lines.iter().zip(&cells) {
        let pad = label_w - label.chars().count();
        let _ = write!(s, "{label}{}", " ".repeat(pad));
        for (v, w) in c.iter().zip(&col_w) {
            let _ = write!(s, "  {v:>w$}");
        }
        s.push('\n');
    }
    s
}

/// Absolute elbow work of a torque/rate sample sequence; what the rollout
/// accumulates, exposed for callers that splice their own phases in.
pub fn absolute_work(samples: impl IntoIterator<Item = (f64, f64)>, dt: f64) -> f64 {
    samples.into_iter().map(|(u, qd2)| (u * qd2).abs() * dt).sum()
}

/// Hook position for a state, shorthand used by event code elsewhere.
pub fn hook_position(params: &ModelParams, x: &State) -> Vector2<f64> {
    forward_kinematics(params, x.q1, x.q2).end_effector
}
