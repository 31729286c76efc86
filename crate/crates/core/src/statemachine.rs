//! Sequencing of atomic behaviors into continuous brachiation.
//!
//! The robot is always described from its support pivot. In double support
//! the other hook sits on the back bar (`B`) or the front bar (`F`);
//! relabeling the chain from the other hook turns one into the other. A
//! swing that misses its bar ends hanging from the pivot (`Z`).

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, ModelParams, State};
use crate::error::{Error, Result};
use crate::maneuvers::{catch_controller, double_support_pose, simulate_release, CatchSpec, HookContact, ReleaseSpec};
use crate::sim::{
    disturbed_params, perturbed_start, rollout, ArmRole, ControllerFactory, Disturbance, Goal, MetricsReport,
    Obstacles, Outcome, PdController, RolloutConfig, Trace, TraceRow, TvlqrController, ZeroTorque,
};
use crate::pd::PdGains;
use crate::rl_env::{PolicyArtifact, PolicyController};
use crate::trajectory::Trajectory;
use crate::tvlqr::{synthesize, GainSchedule, TvlqrConfig};
use crate::trajopt::{Behavior, WorldGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Primitive {
    ZB,
    ZF,
    BF,
    FB,
    BR,
    FR,
    BC,
    FC,
    /// Idle in double support between primitives.
    Hold,
    /// Hanging from the support hook after a missed grasp.
    Fall,
}

impl Primitive {
    pub const PLANNABLE: [Primitive; 8] = [
        Primitive::ZB,
        Primitive::ZF,
        Primitive::BF,
        Primitive::FB,
        Primitive::BR,
        Primitive::FR,
        Primitive::BC,
        Primitive::FC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Primitive::ZB => "ZB",
            Primitive::ZF => "ZF",
            Primitive::BF => "BF",
            Primitive::FB => "FB",
            Primitive::BR => "BR",
            Primitive::FR => "FR",
            Primitive::BC => "BC",
            Primitive::FC => "FC",
            Primitive::Hold => "HOLD",
            Primitive::Fall => "FALL",
        }
    }

    /// The swing behavior this primitive runs, if it is a swing.
    pub fn swing(self) -> Option<Behavior> {
        match self {
            Primitive::ZB => Some(Behavior::ZB),
            Primitive::ZF => Some(Behavior::ZF),
            Primitive::BF => Some(Behavior::BF),
            Primitive::FB => Some(Behavior::FB),
            _ => None,
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Primitive::PLANNABLE
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown primitive {s:?}; expected one of ZB ZF BF FB BR FR BC FC")))
    }
}

/// Fixed points of the behavior graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Z,
    B,
    F,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    A,
    B,
}

impl Arm {
    fn other(self) -> Arm {
        match self {
            Arm::A => Arm::B,
            Arm::B => Arm::A,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorState {
    pub label: Label,
    pub support_arm: Arm,
    pub pivot_bar_index: i64,
}

impl BehaviorState {
    pub fn hands_attached(&self) -> usize {
        if self.label == Label::Z {
            1
        } else {
            2
        }
    }
}

/// Relabels the chain from the other hook: the swing hand becomes the pivot.
pub fn switch_support(support: &BehaviorState, x: &State) -> Result<(BehaviorState, State)> {
    let (label, step) = match support.label {
        Label::Z => return Err(Error::SingleSupport),
        Label::B => (Label::F, -1),
        Label::F => (Label::B, 1),
    };
    let next = BehaviorState {
        label,
        support_arm: support.support_arm.other(),
        pivot_bar_index: support.pivot_bar_index + step,
    };
    Ok((next, relabel(x)))
}

/// The coordinate change behind [`switch_support`].
pub fn relabel(x: &State) -> State {
    State::new(wrap_angle(x.q1 + x.q2 + std::f64::consts::PI), -x.q2, x.qd1 + x.qd2, -x.qd2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControllerKind {
    #[serde(rename = "PD")]
    Pd,
    #[serde(rename = "TVLQR")]
    Tvlqr,
    #[serde(rename = "RL")]
    Rl,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::Pd, ControllerKind::Tvlqr, ControllerKind::Rl];

    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::Pd => "PD",
            ControllerKind::Tvlqr => "TVLQR",
            ControllerKind::Rl => "RL",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown controller {s:?}; expected PD, TVLQR or RL")))
    }
}

/// Idle times around the primitives (s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pauses {
    /// Idle before the catch torque is applied.
    pub pre_catch: f64,
    /// Idle in double support before the next release.
    pub between: f64,
}

impl Pauses {
    pub fn for_controller(kind: ControllerKind) -> Self {
        match kind {
            ControllerKind::Pd => Self { pre_catch: 0.1, between: 0.0 },
            ControllerKind::Tvlqr => Self { pre_catch: 0.1, between: 0.1 },
            ControllerKind::Rl => Self { pre_catch: 0.2, between: 0.5 },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanStep {
    pub primitive: Primitive,
    /// Overrides the plan's controller for a swing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerKind>,
}

impl From<Primitive> for PlanStep {
    fn from(primitive: Primitive) -> Self {
        Self { primitive, controller: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorPlan {
    #[serde(default = "default_start")]
    pub start: Label,
    pub controller: ControllerKind,
    pub steps: Vec<PlanStep>,
    /// Controller defaults when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pauses: Option<Pauses>,
}

fn default_start() -> Label {
    Label::Z
}

impl BehaviorPlan {
    pub fn new(controller: ControllerKind, steps: &[Primitive]) -> Self {
        Self { start: Label::Z, controller, steps: steps.iter().map(|&p| p.into()).collect(), pauses: None }
    }

    /// `swings` forward swings from hanging: one ZF, then BF swings.
    pub fn forward(controller: ControllerKind, swings: usize) -> Self {
        let mut steps = Vec::new();
        if swings > 0 {
            steps.extend([Primitive::ZF, Primitive::FC]);
            for _ in 1..swings {
                steps.extend([Primitive::BR, Primitive::BF, Primitive::FC]);
            }
        }
        Self::new(controller, &steps)
    }

    /// One BF swing from back double support.
    pub fn single_bf(controller: ControllerKind) -> Self {
        Self { start: Label::B, ..Self::new(controller, &[Primitive::BR, Primitive::BF, Primitive::FC]) }
    }

    pub fn pauses(&self) -> Pauses {
        self.pauses.unwrap_or_else(|| Pauses::for_controller(self.controller))
    }

    pub fn controller_at(&self, index: usize) -> ControllerKind {
        self.steps[index].controller.unwrap_or(self.controller)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let plan: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        validate_plan(&plan)?;
        Ok(plan)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plan always serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }
}

/// Nodes of the behavior graph. Double support accepts either release; the
/// machine relabels from the other hook when the release needs it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Node {
    Hanging,
    Double,
    ReleasedBack,
    ReleasedFront,
    ArrivedBack,
    ArrivedFront,
}

impl Node {
    fn from_label(label: Label) -> Self {
        if label == Label::Z {
            Node::Hanging
        } else {
            Node::Double
        }
    }
}

/// Successor of `node` under `p`, or `None` if the graph has no such edge.
pub fn transition(node: Node, p: Primitive) -> Option<Node> {
    use Primitive::*;
    match (node, p) {
        (Node::Hanging, ZB) => Some(Node::ArrivedBack),
        (Node::Hanging, ZF) => Some(Node::ArrivedFront),
        (Node::Double, BR) => Some(Node::ReleasedBack),
        (Node::Double, FR) => Some(Node::ReleasedFront),
        (Node::ReleasedBack, BF) => Some(Node::ArrivedFront),
        (Node::ReleasedFront, FB) => Some(Node::ArrivedBack),
        (Node::ArrivedBack, BC) => Some(Node::Double),
        (Node::ArrivedFront, FC) => Some(Node::Double),
        _ => None,
    }
}

fn node_name(node: Node) -> String {
    format!("{node:?}")
}

/// Checks every step against the behavior graph.
pub fn validate_plan(plan: &BehaviorPlan) -> Result<()> {
    let mut node = Node::from_label(plan.start);
    for (index, step) in plan.steps.iter().enumerate() {
        node = transition(node, step.primitive).ok_or_else(|| Error::IllegalTransition {
            index,
            from: node_name(node),
            to: step.primitive.to_string(),
        })?;
    }
    if let Some(p) = plan.pauses {
        if !(p.pre_catch >= 0.0 && p.between >= 0.0) {
            return Err(Error::Config("pauses must be non-negative".into()));
        }
    }
    Ok(())
}

/// Finite row of bars, `gap` apart, indexed from 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ladder {
    pub world: WorldGeometry,
    pub bars: usize,
    /// Bar the support hook starts on.
    pub start_bar: usize,
}

impl Default for Ladder {
    fn default() -> Self {
        Self { world: WorldGeometry::default(), bars: 6, start_bar: 0 }
    }
}

impl Ladder {
    fn exists(&self, index: i64) -> bool {
        index >= 0 && (index as usize) < self.bars
    }

    fn obstacles(&self, pivot: i64) -> Obstacles {
        let mut bars = Vec::new();
        for (offset, p) in [(-1, self.world.back_bar()), (0, Vector2::zeros()), (1, self.world.front_bar())] {
            if self.exists(pivot + offset) {
                bars.push(p);
            }
        }
        Obstacles { bars, r_bar: self.world.r_bar }
    }
}

/// A solved behavior with its TVLQR gains.
#[derive(Clone, Debug)]
pub struct TrackedSwing {
    pub behavior: Behavior,
    pub nominal: Trajectory,
    pub gains: GainSchedule,
}

impl TrackedSwing {
    pub fn new(params: &ModelParams, behavior: Behavior, nominal: Trajectory, config: &TvlqrConfig) -> Result<Self> {
        let gains = synthesize(params, &nominal, config)?;
        Ok(Self { behavior, nominal, gains })
    }
}

/// Swing controller and its nominal for one behavior.
pub struct SwingEntry<'a> {
    pub nominal: Option<&'a Trajectory>,
    /// How long the swing may take before it counts as missed.
    pub horizon: f64,
    pub make: Box<ControllerFactory<'a>>,
}

#[derive(Default)]
pub struct Library<'a> {
    entries: HashMap<(Behavior, ControllerKind), SwingEntry<'a>>,
}

impl<'a> Library<'a> {
    pub fn insert(&mut self, behavior: Behavior, kind: ControllerKind, entry: SwingEntry<'a>) {
        self.entries.insert((behavior, kind), entry);
    }

    pub fn get(&self, behavior: Behavior, kind: ControllerKind) -> Option<&SwingEntry<'a>> {
        self.entries.get(&(behavior, kind))
    }

    /// PD and TVLQR for each solved behavior, plus the policy for BF if given.
    pub fn tracking(swings: &'a [TrackedSwing], pd: &'a PdGains, bf_policy: Option<&'a PolicyArtifact>) -> Self {
        let mut lib = Self::default();
        for s in swings {
            let (n, g) = (&s.nominal, &s.gains);
            lib.insert(s.behavior, ControllerKind::Pd, SwingEntry {
                nominal: Some(n),
                horizon: 0.0,
                make: Box::new(move || Box::new(PdController { nominal: n, gains: *pd })),
            });
            lib.insert(s.behavior, ControllerKind::Tvlqr, SwingEntry {
                nominal: Some(n),
                horizon: 0.0,
                make: Box::new(move || Box::new(TvlqrController::new(g, n))),
            });
            if let (Behavior::BF, Some(policy)) = (s.behavior, bf_policy) {
                lib.insert(Behavior::BF, ControllerKind::Rl, SwingEntry {
                    nominal: Some(n),
                    horizon: 0.0,
                    make: Box::new(move || Box::new(PolicyController { policy, arm_scale: 1.0 })),
                });
            }
        }
        lib
    }

    /// Every (swing, controller) pair the plan needs, or the first missing one.
    pub fn check(&self, plan: &BehaviorPlan) -> Result<()> {
        for (i, step) in plan.steps.iter().enumerate() {
            if let Some(b) = step.primitive.swing() {
                let kind = plan.controller_at(i);
                if self.get(b, kind).is_none() {
                    return Err(Error::Config(format!("no {kind} controller for {b} (step {i})")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecOptions {
    #[serde(default)]
    pub rollout: RolloutConfig,
    #[serde(default)]
    pub contact: HookContact,
    #[serde(default)]
    pub disturbances: Vec<Disturbance>,
    /// Add the measured trial-to-trial spread of the release handoff.
    #[serde(default = "yes")]
    pub handoff_noise: bool,
    #[serde(default)]
    pub seed: u64,
    /// How long the recovery fall is simulated after a miss.
    #[serde(default = "default_fall_time")]
    pub fall_time: f64,
}

fn yes() -> bool {
    true
}

fn default_fall_time() -> f64 {
    2.0
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            rollout: RolloutConfig::default(),
            contact: HookContact::default(),
            disturbances: Vec::new(),
            handoff_noise: true,
            seed: 0,
            fall_time: default_fall_time(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub index: usize,
    pub primitive: Primitive,
    pub before: BehaviorState,
    pub after: BehaviorState,
    pub duration: f64,
    pub energy: f64,
    /// Swing outcome; `None` for non-swing primitives.
    pub outcome: Option<Outcome>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanRun {
    pub trace: Trace,
    pub steps: Vec<StepRecord>,
    pub report: MetricsReport,
    pub final_state: BehaviorState,
    /// Failing step and reason when the plan did not complete.
    pub abort: Option<(usize, String)>,
}

impl PlanRun {
    pub fn completed(&self) -> bool {
        self.abort.is_none()
    }

    pub fn ensure_completed(&self) -> Result<()> {
        match &self.abort {
            None => Ok(()),
            Some((step, reason)) => Err(Error::PlanAborted { step: *step, reason: reason.clone() }),
        }
    }
}

/// Tracking-error sums over swings that follow a nominal.
#[derive(Default)]
struct ErrorSums {
    pos: f64,
    vel: f64,
    tau: f64,
    n: usize,
}

impl ErrorSums {
    fn add(&mut self, m: &MetricsReport, rows: usize) {
        if let (Some(p), Some(v), Some(t)) = (m.rms_pos_error, m.rms_vel_error, m.rms_torque_error) {
            let n = rows as f64;
            self.pos += p * p * n;
            self.vel += v * v * n;
            self.tau += t * t * n;
            self.n += rows;
        }
    }

    fn rms(&self, s: f64) -> Option<f64> {
        (self.n > 0).then(|| (s / self.n as f64).sqrt())
    }
}

/// Physical arm carrying each added mass, fixed at the start of the plan.
fn mass_arms(options: &ExecOptions, start: &BehaviorState) -> Vec<(Disturbance, Arm)> {
    options
        .disturbances
        .iter()
        .map(|d| {
            let arm = match d {
                Disturbance::AddedMass { arm: ArmRole::Support, .. } => start.support_arm,
                _ => start.support_arm.other(),
            };
            (*d, arm)
        })
        .collect()
}

/// Disturbances as seen from the current support arm. A mass sits at a
/// fixed place on its arm, measured from the elbow.
fn disturbances_now(params: &ModelParams, arms: &[(Disturbance, Arm)], support: Arm) -> Vec<Disturbance> {
    arms.iter()
        .map(|&(d, arm)| match d {
            Disturbance::AddedMass { mass, arm: role, distance } => {
                let from_elbow = distance.unwrap_or(match role {
                    ArmRole::Swing => params.l2,
                    ArmRole::Support => 0.0,
                });
                if arm == support {
                    Disturbance::AddedMass { mass, arm: ArmRole::Support, distance: Some(params.l1 - from_elbow) }
                } else {
                    Disturbance::AddedMass { mass, arm: ArmRole::Swing, distance: Some(from_elbow) }
                }
            }
            other => other,
        })
        .collect()
}

fn hold_trace(x: &State, duration: f64, dt: f64, u_of: impl Fn(f64) -> f64, label: Primitive) -> Trace {
    let n = (duration / dt).round() as usize;
    let rows = (0..=n).map(|i| {
        let t = i as f64 * dt;
        TraceRow { t, x: *x, u: u_of(t), energy: 0.0, primitive: label }
    });
    Trace { rows: rows.collect() }
}

/// Runs `plan` on the ladder, starting at rest in the plan's start pose.
pub fn execute_plan(
    params: &ModelParams,
    plan: &BehaviorPlan,
    ladder: &Ladder,
    library: &Library<'_>,
    options: &ExecOptions,
) -> Result<PlanRun> {
    validate_plan(plan)?;
    library.check(plan)?;
    options.rollout.validate()?;
    let world = ladder.world;
    let dt = options.rollout.dt;
    let pauses = plan.pauses();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

    let mut support = BehaviorState { label: plan.start, support_arm: Arm::A, pivot_bar_index: ladder.start_bar as i64 };
    let mut x = match plan.start {
        Label::Z => State::default(),
        Label::B => rest_pose(params, world.back_bar())?,
        Label::F => rest_pose(params, world.front_bar())?,
    };
    let arms = mass_arms(options, &support);

    let mut trace = Trace::default();
    let mut steps = Vec::with_capacity(plan.steps.len());
    let mut errors = ErrorSums::default();
    let mut abort = None;

    for (index, step) in plan.steps.iter().enumerate() {
        let before = support;
        let energy_before = trace.energy();
        let t_before = trace.rows.last().map_or(0.0, |r| r.t);
        let mut outcome = None;
        match step.primitive {
            Primitive::BR | Primitive::FR => {
                let want = if step.primitive == Primitive::BR { Label::B } else { Label::F };
                if support.label != want {
                    (support, x) = switch_support(&support, &x)?;
                }
                let (target, _) = swing_target(step.primitive, &support);
                if !ladder.exists(target) {
                    abort = Some((index, format!("no bar at index {target}")));
                    break;
                }
                let p_now = disturbed_params(params, &disturbances_now(params, &arms, support.support_arm));
                // let the chain settle before letting go
                if x.qd().norm() >= 0.1 && pauses.between > 0.0 {
                    trace.extend_from(&hold_trace(&x, pauses.between, dt, |_| 0.0, Primitive::Hold));
                }
                let spec = if step.primitive == Primitive::BR { ReleaseSpec::back() } else { ReleaseSpec::front() };
                let out = match simulate_release(&p_now, &spec, &options.contact, &x) {
                    Ok(out) => out,
                    Err(e @ Error::ReleaseTimeout(_)) => {
                        abort = Some((index, e.to_string()));
                        break;
                    }
                    Err(e) => return Err(e),
                };
                trace.extend_from(&release_trace(&out.trace, dt, step.primitive));
                let mut handoff = out.handoff;
                if options.handoff_noise {
                    let zero = State::default();
                    let noise = perturbed_start(&zero, &spec.sigma0, &mut rng);
                    handoff = State::from_vector(&(handoff.to_vector() + noise.to_vector()));
                }
                x = handoff;
                if let Some(last) = trace.rows.last_mut() {
                    last.x = x;
                }
                support.label = Label::Z;
            }
            Primitive::ZB | Primitive::ZF | Primitive::BF | Primitive::FB => {
                let behavior = step.primitive.swing().expect("swing primitive");
                let (target, forward) = swing_target(step.primitive, &support);
                if !ladder.exists(target) {
                    abort = Some((index, format!("no bar at index {target}")));
                    break;
                }
                let kind = plan.controller_at(index);
                let entry = library.get(behavior, kind).expect("library checked");
                let deadline = entry.nominal.map_or(entry.horizon, |n| n.duration() + options.rollout.overtime);
                let goal = if forward { Goal::front(&world, deadline) } else { Goal::back(&world, deadline) };
                let mut ctrl = (entry.make)();
                let dist = disturbances_now(params, &arms, support.support_arm);
                let p_now = disturbed_params(params, &dist);
                let result = rollout(
                    params,
                    ctrl.as_mut(),
                    &x,
                    &goal,
                    &ladder.obstacles(support.pivot_bar_index),
                    &options.rollout,
                    &dist,
                    step.primitive,
                );
                let r = match result {
                    Ok(r) => r,
                    Err(Error::NumericalDivergence { time }) => {
                        abort = Some((index, format!("state diverged {time:.3} s into {behavior}")));
                        break;
                    }
                    Err(e) => return Err(e),
                };
                errors.add(&r.metrics, r.trace.rows.len());
                trace.extend_from(&r.trace);
                outcome = Some(r.outcome);
                x = r.final_state();
                if r.outcome != Outcome::Grasped {
                    let fall = fall_trace(&p_now, &x, options)?;
                    trace.extend_from(&fall);
                    support.label = Label::Z;
                    steps.push(step_record(index, step.primitive, before, support, &trace, t_before, energy_before, outcome));
                    abort = Some((index, format!("{behavior} missed the bar ({:?})", r.outcome)));
                    break;
                }
                // grasp impact: the hook seats and the chain comes to rest on both bars
                let bar = if forward { world.front_bar() } else { world.back_bar() };
                x = rest_pose(params, bar)?;
                if let Some(last) = trace.rows.last_mut() {
                    last.x = x;
                }
                support.label = if forward { Label::F } else { Label::B };
            }
            Primitive::BC | Primitive::FC => {
                let catch = CatchSpec { idle_before: pauses.pre_catch, ..catch_for(step.primitive) };
                trace.extend_from(&hold_trace(&x, catch.total(), dt, |t| catch_controller(&catch, t).0, step.primitive));
                (support, x) = switch_support(&support, &x)?;
                if let Some(last) = trace.rows.last_mut() {
                    last.x = x;
                }
            }
            Primitive::Hold | Primitive::Fall => unreachable!("not plannable; rejected by validate_plan"),
        }
        steps.push(step_record(index, step.primitive, before, support, &trace, t_before, energy_before, outcome));
    }

    let report = plan_report(&trace, &errors, abort.is_none());
    Ok(PlanRun { trace, steps, report, final_state: support, abort })
}

#[allow(clippy::too_many_arguments)]
fn step_record(
    index: usize,
    primitive: Primitive,
    before: BehaviorState,
    after: BehaviorState,
    trace: &Trace,
    t_before: f64,
    energy_before: f64,
    outcome: Option<Outcome>,
) -> StepRecord {
    let t_after = trace.rows.last().map_or(0.0, |r| r.t);
    StepRecord {
        index,
        primitive,
        before,
        after,
        duration: t_after - t_before,
        energy: trace.energy() - energy_before,
        outcome,
    }
}

fn catch_for(p: Primitive) -> CatchSpec {
    if p == Primitive::BC {
        CatchSpec::back()
    } else {
        CatchSpec::default()
    }
}

/// Ladder index of the bar a primitive heads for, and whether it is forward.
fn swing_target(p: Primitive, support: &BehaviorState) -> (i64, bool) {
    let forward = matches!(p, Primitive::ZF | Primitive::BF | Primitive::BR);
    let target = support.pivot_bar_index + if forward { 1 } else { -1 };
    (target, forward)
}

fn rest_pose(params: &ModelParams, bar: Vector2<f64>) -> Result<State> {
    double_support_pose(params, bar)
        .ok_or_else(|| Error::InvalidParams(format!("bar at ({:.3}, {:.3}) is out of reach", bar.x, bar.y)))
}

/// Release log resampled onto the plan step.
fn release_trace(rows: &[(f64, State, f64)], dt: f64, label: Primitive) -> Trace {
    let mut out = Vec::new();
    let mut energy = 0.0;
    let mut next = 0.0;
    for w in rows.windows(2) {
        let (t, x, u) = w[0];
        if t >= next - 1e-12 {
            out.push(TraceRow { t, x, u, energy, primitive: label });
            next += dt;
        }
        energy += (u * x.qd2).abs() * (w[1].0 - t);
    }
    if let Some(&(t, x, u)) = rows.last() {
        out.push(TraceRow { t, x, u, energy, primitive: label });
    }
    Trace { rows: out }
}

fn fall_trace(params: &ModelParams, x: &State, options: &ExecOptions) -> Result<Trace> {
    let cfg = RolloutConfig { events: false, ..options.rollout };
    let r = rollout(
        params,
        &mut ZeroTorque,
        x,
        &Goal::Free { duration: options.fall_time },
        &Obstacles { bars: vec![], r_bar: 0.0 },
        &cfg,
        &[],
        Primitive::Fall,
    )?;
    Ok(r.trace)
}

fn plan_report(trace: &Trace, errors: &ErrorSums, success: bool) -> MetricsReport {
    MetricsReport {
        max_abs_torque: trace.rows.iter().fold(0.0f64, |m, r| m.max(r.u.abs())),
        rms_pos_error: errors.rms(errors.pos),
        rms_vel_error: errors.rms(errors.vel),
        rms_torque_error: errors.rms(errors.tau),
        energy: trace.energy(),
        duration: trace.duration(),
        success,
    }
}
