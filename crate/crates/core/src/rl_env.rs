//! Episode environment for learning the BF swing: shaped reward, termination
//! rules, noisy observations, an MLP policy file format, batch evaluation,
//! and damping identification from recordings.

use std::path::Path;

use nalgebra::Vector2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{forward_kinematics, rk4_step, rk4_step_varying, ModelParams, State, MOTOR_TORQUE_LIMIT};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::sim::{perturbed_start, repetition_rng, Controller};
use crate::trajectory::Trajectory;
use crate::trajopt::{WorldGeometry, X0_BR, XF_FRONT};

/// Step function with `H(0) = 0`.
fn heaviside(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `H(d_max − d) (d/d_max − 1)²` with `d = ‖p − p_bar‖`.
pub fn region_penalty(p: Vector2<f64>, p_bar: Vector2<f64>, d_max: f64) -> f64 {
    let d = (p - p_bar).norm();
    heaviside(d_max - d) * (d / d_max - 1.0).powi(2)
}

/// [`region_penalty`] on the side of the line through `p_bar` that `n` points to.
pub fn sided_region(p: Vector2<f64>, p_bar: Vector2<f64>, d_max: f64, n: Vector2<f64>) -> f64 {
    heaviside((p - p_bar).dot(&n)) * region_penalty(p, p_bar, d_max)
}

/// Reward weights and regions. Radii are multiples of the bar radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub collision_penalty: f64,
    pub back_bar_radius: f64,
    pub support_bar_radius: f64,
    pub below_weight: f64,
    pub below_radius: f64,
    pub below_normal: [f64; 2],
    pub above_radii: Vec<f64>,
    pub above_normal: [f64; 2],
    pub config_weight: f64,
    pub config_decay: f64,
    pub u_lim: f64,
    pub vel_lim: f64,
    pub smooth_weight: f64,
    pub target_weight: f64,
    pub q_target: [f64; 2],
    pub delta_q: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            collision_penalty: -20.0,
            back_bar_radius: 10.0,
            support_bar_radius: 17.0,
            below_weight: 5.0,
            below_radius: 15.0,
            below_normal: [1.7, -1.0],
            above_radii: vec![30.0, 15.0, 10.0],
            above_normal: [-1.7, 1.0],
            config_weight: 0.2,
            config_decay: 0.5,
            u_lim: 3.0,
            vel_lim: 6.0,
            smooth_weight: 0.001,
            target_weight: 30.0,
            q_target: [XF_FRONT.q1, XF_FRONT.q2],
            delta_q: 0.05,
        }
    }
}

impl RewardConfig {
    pub fn target_distance(&self, x: &State) -> f64 {
        (x.q1 - self.q_target[0]).hypot(x.q2 - self.q_target[1])
    }

    pub fn reached(&self, x: &State) -> bool {
        self.target_distance(x) <= self.delta_q
    }
}

/// The ten reward terms, each already carrying its sign.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub collision: f64,
    pub back_bar: f64,
    pub support_bar: f64,
    pub target_below: f64,
    pub target_above: f64,
    pub configuration: f64,
    pub torque: f64,
    pub velocity: f64,
    pub smoothness: f64,
    pub target: f64,
}

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.collision
            + self.back_bar
            + self.support_bar
            + self.target_below
            + self.target_above
            + self.configuration
            + self.torque
            + self.velocity
            + self.smoothness
            + self.target
    }
}

pub fn reward_terms(
    cfg: &RewardConfig,
    params: &ModelParams,
    x: &State,
    u: f64,
    u_prev: f64,
    collided: bool,
    world: &WorldGeometry,
) -> RewardTerms {
    let p = forward_kinematics(params, x.q1, x.q2).end_effector;
    let r = world.r_bar;
    let front = world.front_bar();
    let below = Vector2::from(cfg.below_normal);
    let above = Vector2::from(cfg.above_normal);
    let excess = |v: f64, lim: f64| heaviside(v - lim) * (v - lim).powi(2);
    let dq = (x.q1 - cfg.q_target[0]).powi(2) + (x.q2 - cfg.q_target[1]).powi(2);
    RewardTerms {
        collision: if collided { cfg.collision_penalty } else { 0.0 },
        back_bar: -region_penalty(p, world.back_bar(), cfg.back_bar_radius * r),
        support_bar: -region_penalty(p, Vector2::zeros(), cfg.support_bar_radius * r),
        target_below: -cfg.below_weight * sided_region(p, front, cfg.below_radius * r, below),
        target_above: cfg.above_radii.iter().map(|k| sided_region(p, front, k * r, above)).sum(),
        configuration: cfg.config_weight * (-cfg.config_decay * dq).exp(),
        torque: -excess(u.abs(), cfg.u_lim),
        velocity: -excess(x.qd2.abs(), cfg.vel_lim),
        smoothness: -cfg.smooth_weight * (u - u_prev).abs(),
        target: cfg.target_weight * heaviside(cfg.delta_q - dq.sqrt()),
    }
}

pub fn reward(
    cfg: &RewardConfig,
    params: &ModelParams,
    x: &State,
    u: f64,
    u_prev: f64,
    collided: bool,
    world: &WorldGeometry,
) -> f64 {
    reward_terms(cfg, params, x, u, u_prev, collided, world).total()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub control_rate: f64,
    /// RK4 steps per control period.
    pub substeps: usize,
    pub max_episode: f64,
    pub obs_noise_sigma: f64,
    pub b_pivot: f64,
    pub b_motor: f64,
    /// Torque scale when the policy drives the other physical arm.
    pub opposite_arm_scale: f64,
    pub x0: State,
    /// Spread of the initial state around `x0`.
    pub init_sigma: [f64; 4],
    pub torque_clamp: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            control_rate: 250.0,
            substeps: 4,
            max_episode: 2.0,
            obs_noise_sigma: 0.025,
            b_pivot: 0.044,
            b_motor: 0.06,
            opposite_arm_scale: 0.92,
            x0: X0_BR,
            init_sigma: [0.0; 4],
            torque_clamp: MOTOR_TORQUE_LIMIT,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.control_rate > 0.0
            && self.substeps > 0
            && self.max_episode > 0.0
            && self.obs_noise_sigma >= 0.0
            && self.b_pivot >= 0.0
            && self.b_motor >= 0.0
            && self.opposite_arm_scale > 0.0
            && self.torque_clamp > 0.0
            && self.init_sigma.iter().all(|s| *s >= 0.0);
        if !ok {
            return Err(Error::Config(format!("invalid environment config: {self:?}")));
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        1.0 / self.control_rate
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Noise-free state after the step.
    pub state: State,
    pub time: f64,
    pub collided: bool,
    pub success: bool,
    /// Ended by the episode length rather than an event.
    pub truncated: bool,
    pub terms: RewardTerms,
    /// Absolute elbow work during the step.
    pub energy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub observation: [f64; 4],
    pub reward: f64,
    pub terminated: bool,
    pub info: StepInfo,
}

/// One BF episode. Single owner; batch evaluation builds one per episode.
#[derive(Clone, Debug)]
pub struct BrachiationEnv {
    params: ModelParams,
    cfg: EnvConfig,
    reward: RewardConfig,
    world: WorldGeometry,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    x: State,
    t: f64,
    steps: usize,
    u_prev: f64,
    done: bool,
    cleared: [bool; 3],
}

impl BrachiationEnv {
    pub fn new(params: &ModelParams, cfg: EnvConfig, reward: RewardConfig, world: WorldGeometry, rng: ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let params = params.with_damping(cfg.b_pivot, cfg.b_motor);
        params.validate()?;
        let noise = (cfg.obs_noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.obs_noise_sigma).expect("positive sigma"));
        let mut env = Self {
            params,
            x: cfg.x0,
            cfg,
            reward,
            world,
            rng,
            noise,
            t: 0.0,
            steps: 0,
            u_prev: 0.0,
            done: false,
            cleared: [false; 3],
        };
        env.reset();
        Ok(env)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn state(&self) -> State {
        self.x
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    /// Draws a new initial state and returns its observation.
    pub fn reset(&mut self) -> [f64; 4] {
        self.x = perturbed_start(&self.cfg.x0, &self.cfg.init_sigma, &mut self.rng);
        self.t = 0.0;
        self.steps = 0;
        self.u_prev = 0.0;
        self.done = false;
        let ee = self.hook();
        self.cleared = self.bars().map(|b| (ee - b).norm() > self.world.r_bar);
        self.observe()
    }

    fn bars(&self) -> [Vector2<f64>; 3] {
        [self.world.back_bar(), Vector2::zeros(), self.world.front_bar()]
    }

    fn hook(&self) -> Vector2<f64> {
        forward_kinematics(&self.params, self.x.q1, self.x.q2).end_effector
    }

    fn observe(&mut self) -> [f64; 4] {
        let mut obs = self.x.to_array();
        if let Some(n) = self.noise {
            for v in &mut obs {
                *v += n.sample(&mut self.rng);
            }
        }
        obs
    }

    /// Applies `u` for one control period.
    pub fn step(&mut self, u: f64) -> Result<StepResult> {
        if self.done {
            return Err(Error::StepAfterTermination);
        }
        let u = u.clamp(-self.cfg.torque_clamp, self.cfg.torque_clamp);
        let h = self.cfg.period() / self.cfg.substeps as f64;
        let mut v = self.x.to_vector();
        let mut energy = 0.0;
        for _ in 0..self.cfg.substeps {
            energy += (u * v[3]).abs() * h;
            v = rk4_step(&self.params, &v, u, h)?;
        }
        self.x = State::from_vector(&v);
        self.steps += 1;
        self.t = self.steps as f64 * self.cfg.period();

        let ee = self.hook();
        let mut collided = false;
        let bars = self.bars();
        for (b, clear) in bars.iter().zip(self.cleared.iter_mut()) {
            let inside = (ee - b).norm() <= self.world.r_bar;
            if !inside {
                *clear = true;
            } else if *clear {
                collided = true;
            }
        }
        let terms = reward_terms(&self.reward, &self.params, &self.x, u, self.u_prev, collided, &self.world);
        self.u_prev = u;
        let success = self.reward.reached(&self.x);
        let truncated = !collided && !success && self.t >= self.cfg.max_episode - 1e-12;
        self.done = collided || success || truncated;
        Ok(StepResult {
            observation: self.observe(),
            reward: terms.total(),
            terminated: self.done,
            info: StepInfo { state: self.x, time: self.t, collided, success, truncated, terms, energy },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

/// Dense layer; `weights[i][j]` maps input `j` to output `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// The BF policy shipped with the crate, distilled from TVLQR on the
/// default BF nominal.
pub const BF_POLICY_JSON: &str = include_str!("../assets/bf_policy.json");

/// A feed-forward policy mapping the 4-channel observation to a torque.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyArtifact {
    /// Widths from input to output, e.g. `[4, 32, 32, 1]`.
    pub sizes: Vec<usize>,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub layers: Vec<Layer>,
    /// Torque per unit network output.
    pub output_scale: f64,
    /// Drive the other physical arm, whose motor is weaker.
    #[serde(default)]
    pub opposite_arm: bool,
}

impl PolicyArtifact {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Policy(m));
        if self.sizes.len() < 2 || self.sizes[0] != 4 || *self.sizes.last().unwrap() != 1 {
            return bad(format!("sizes must run from 4 inputs to 1 output, got {:?}", self.sizes));
        }
        if self.layers.len() != self.sizes.len() - 1 {
            return bad(format!("{} layers declared by sizes but {} present", self.sizes.len() - 1, self.layers.len()));
        }
        if self.input_mean.len() != 4 || self.input_scale.len() != 4 {
            return bad("input normalization needs 4 entries each".into());
        }
        if self.input_scale.iter().any(|s| !(s.is_finite() && *s != 0.0)) || !self.output_scale.is_finite() {
            return bad("normalization constants must be finite and nonzero".into());
        }
        for (k, layer) in self.layers.iter().enumerate() {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            if layer.weights.len() != n_out || layer.bias.len() != n_out || layer.weights.iter().any(|r| r.len() != n_in) {
                return bad(format!("layer {k} is not {n_out}x{n_in}"));
            }
            if layer.weights.iter().flatten().chain(&layer.bias).any(|v| !v.is_finite()) {
                return bad(format!("layer {k} has non-finite entries"));
            }
        }
        Ok(())
    }

    /// Network output for a raw observation, before `output_scale`.
    pub fn forward(&self, obs: &[f64; 4]) -> f64 {
        let mut a: Vec<f64> = obs.iter().zip(&self.input_mean).zip(&self.input_scale).map(|((o, m), s)| (o - m) / s).collect();
        for layer in &self.layers {
            a = layer
                .weights
                .iter()
                .zip(&layer.bias)
                .map(|(row, b)| layer.activation.apply(row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>() + b))
                .collect();
        }
        a[0]
    }

    /// Torque command, before any arm scaling.
    pub fn act(&self, obs: &[f64; 4]) -> f64 {
        self.output_scale * self.forward(obs)
    }

    /// A policy that always outputs zero torque.
    pub fn zero(hidden: usize) -> Self {
        let layer = |n_in: usize, n_out: usize, activation| Layer { weights: vec![vec![0.0; n_in]; n_out], bias: vec![0.0; n_out], activation };
        Self {
            sizes: vec![4, hidden, 1],
            input_mean: vec![0.0; 4],
            input_scale: vec![1.0; 4],
            layers: vec![layer(4, hidden, Activation::Tanh), layer(hidden, 1, Activation::Identity)],
            output_scale: 1.0,
            opposite_arm: false,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("artifact always serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(s).map_err(|e| Error::Policy(e.to_string()))?;
        a.validate()?;
        Ok(a)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn bundled_bf() -> Self {
        Self::from_json(BF_POLICY_JSON).expect("bundled policy is valid")
    }
}

/// Runs a policy inside the simulator. Acts on the true state; the arm
/// scale applies when the artifact says so.
pub struct PolicyController<'a> {
    pub policy: &'a PolicyArtifact,
    pub arm_scale: f64,
}

impl<'a> PolicyController<'a> {
    pub fn new(policy: &'a PolicyArtifact, env: &EnvConfig) -> Self {
        let arm_scale = if policy.opposite_arm { env.opposite_arm_scale } else { 1.0 };
        Self { policy, arm_scale }
    }
}

impl Controller for PolicyController<'_> {
    fn name(&self) -> &str {
        "RL"
    }
    fn torque(&mut self, x: &State, _t: f64) -> f64 {
        self.arm_scale * self.policy.act(&x.to_array())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_energy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub success: bool,
    pub ret: f64,
    pub energy: f64,
    pub steps: usize,
}

/// One episode of `policy` from the environment's seeded start.
pub fn run_episode(policy: &PolicyArtifact, env: &mut BrachiationEnv, scale: f64) -> Result<EpisodeSummary> {
    let mut obs = env.reset();
    let mut out = EpisodeSummary { success: false, ret: 0.0, energy: 0.0, steps: 0 };
    loop {
        let r = env.step(scale * policy.act(&obs))?;
        out.ret += r.reward;
        out.energy += r.info.energy;
        out.steps += 1;
        obs = r.observation;
        if r.terminated {
            out.success = r.info.success;
            return Ok(out);
        }
    }
}

/// Success rate, mean return and mean elbow work over seeded episodes.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    artifact: &PolicyArtifact,
    params: &ModelParams,
    env: &EnvConfig,
    reward: &RewardConfig,
    world: &WorldGeometry,
    episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<EvalStats> {
    artifact.validate()?;
    env.validate()?;
    let scale = if artifact.opposite_arm { env.opposite_arm_scale } else { 1.0 };
    let results = par::map_indices(exec, episodes, |ep| {
        let mut e = BrachiationEnv::new(params, env.clone(), reward.clone(), *world, repetition_rng(seed, ep))?;
        run_episode(artifact, &mut e, scale)
    });
    let results: Vec<EpisodeSummary> = results.into_iter().collect::<Result<_>>()?;
    let n = episodes.max(1) as f64;
    Ok(EvalStats {
        episodes,
        success_rate: results.iter().filter(|r| r.success).count() as f64 / n,
        mean_return: results.iter().map(|r| r.ret).sum::<f64>() / n,
        mean_energy: results.iter().map(|r| r.energy).sum::<f64>() / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationOptions {
    /// Grid points per axis.
    pub grid: usize,
    /// Upper bound of both damping coefficients.
    pub bound: f64,
    /// Replay integrator step.
    pub dt: f64,
    /// Refinement stops once the pattern step is below this.
    pub tolerance: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { grid: 21, bound: 0.2, dt: 1e-3, tolerance: 1e-6 }
    }
}

/// Summed squared state deviation of a replay at the given damping from the
/// recorded knots.
pub fn calibration_objective(params: &ModelParams, recorded: &Trajectory, b_pivot: f64, b_motor: f64, dt: f64) -> f64 {
    let p = params.with_damping(b_pivot, b_motor);
    let knots = recorded.knots();
    let mut x = knots[0].state.to_vector();
    let mut t = 0.0;
    let mut cost = 0.0;
    for k in &knots[1..] {
        let n = ((k.t - t) / dt).ceil().max(1.0) as usize;
        let h = (k.t - t) / n as f64;
        for i in 0..n {
            let t0 = t + i as f64 * h;
            let step = rk4_step_varying(
                &p,
                &x,
                recorded.input_at(t0),
                recorded.input_at(t0 + h / 2.0),
                recorded.input_at(t0 + h),
                h,
            );
            match step {
                Ok(v) if v.iter().all(|c| c.is_finite()) => x = v,
                _ => return f64::INFINITY,
            }
        }
        t = k.t;
        cost += (x - k.state.to_vector()).norm_squared();
    }
    cost
}

/// Damping `(b_pivot, b_motor)` whose torque replay best matches a recording:
/// a grid over `[0, bound]²`, then a compass search from the best point.
pub fn calibrate_damping(params: &ModelParams, recorded: &Trajectory, opts: &CalibrationOptions, exec: Execution) -> Result<(f64, f64)> {
    if recorded.duration() < 1.0 {
        return Err(Error::InvalidTrajectory(format!("recording covers {:.3} s; at least 1 s is needed", recorded.duration())));
    }
    if recorded.knots().iter().all(|k| k.u == 0.0) {
        return Err(Error::DegenerateRecording);
    }
    if opts.grid < 2 || !(opts.bound > 0.0) || !(opts.dt > 0.0) || !(opts.tolerance > 0.0) {
        return Err(Error::Config(format!("invalid calibration options {opts:?}")));
    }
    let spacing = opts.bound / (opts.grid - 1) as f64;
    let points: Vec<(f64, f64)> =
        (0..opts.grid * opts.grid).map(|i| ((i / opts.grid) as f64 * spacing, (i % opts.grid) as f64 * spacing)).collect();
    let costs = par::map_slice(exec, &points, |&(a, b)| calibration_objective(params, recorded, a, b, opts.dt));
    let (mut best, mut best_cost) = (points[0], costs[0]);
    for (p, c) in points.iter().zip(&costs) {
        if *c < best_cost {
            best = *p;
            best_cost = *c;
        }
    }
    let mut step = spacing / 2.0;
    while step >= opts.tolerance {
        let mut moved = false;
        for (da, db) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let cand = ((best.0 + da).clamp(0.0, opts.bound), (best.1 + db).clamp(0.0, opts.bound));
            if cand == best {
                continue;
            }
            let c = calibration_objective(params, recorded, cand.0, cand.1, opts.dt);
            if c < best_cost {
                best = cand;
                best_cost = c;
                moved = true;
            }
        }
        if !moved {
            step /= 2.0;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Knot;
    use rand::SeedableRng;

    fn env_with(cfg: EnvConfig, seed: u64) -> BrachiationEnv {
        BrachiationEnv::new(&ModelParams::default(), cfg, RewardConfig::default(), WorldGeometry::default(), ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn quiet() -> EnvConfig {
        EnvConfig { obs_noise_sigma: 0.0, ..EnvConfig::default() }
    }

    #[test]
    fn region_penalty_profile() {
        let o = Vector2::zeros();
        assert_eq!(region_penalty(o, o, 0.4), 1.0);
        assert_eq!(region_penalty(Vector2::new(0.2, 0.0), o, 0.4), 0.25);
        assert_eq!(region_penalty(Vector2::new(0.0, 0.4), o, 0.4), 0.0);
        assert_eq!(region_penalty(Vector2::new(3.0, 1.0), o, 0.4), 0.0);
    }

    #[test]
    fn sided_region_gate() {
        let bar = Vector2::new(0.34, 0.0);
        let n = Vector2::new(-1.7, 1.0);
        assert_eq!(sided_region(bar + n * 1e-9, bar, 0.3, n), region_penalty(bar + n * 1e-9, bar, 0.3));
        assert!(sided_region(bar + n * 1e-9, bar, 0.3, n) > 0.999);
        assert_eq!(sided_region(bar - n * 0.01, bar, 0.3, n), 0.0);
        // On the separatrix itself the gate is closed.
        // Halving is exact, so this point lies exactly on the line.
        let on_line = Vector2::new(0.5, 0.85);
        assert_eq!(on_line.dot(&n), 0.0);
        assert_eq!(sided_region(on_line, Vector2::zeros(), 2.0, n), 0.0);
    }

    #[test]
    fn collision_costs_twenty() {
        let cfg = RewardConfig::default();
        let p = ModelParams::default();
        let w = WorldGeometry::default();
        let x = X0_BR;
        let a = reward_terms(&cfg, &p, &x, 0.0, 0.0, true, &w);
        let b = reward_terms(&cfg, &p, &x, 0.0, 0.0, false, &w);
        assert_eq!(a.collision, -20.0);
        assert_eq!(a.total() - b.total(), -20.0);
    }

    #[test]
    fn exact_target_pays_both_bonuses() {
        let cfg = RewardConfig::default();
        // A wide gap keeps every bar region out of reach.
        let w = WorldGeometry { gap: 10.0, r_bar: 0.02 };
        let x = State::new(cfg.q_target[0], cfg.q_target[1], 0.0, 0.0);
        let t = reward_terms(&cfg, &ModelParams::default(), &x, 0.0, 0.0, false, &w);
        assert_eq!(t.target, 30.0);
        assert_eq!(t.configuration, 0.2);
        assert_eq!(t.total(), 30.2);
    }

    #[test]
    fn torque_and_velocity_tails() {
        let cfg = RewardConfig::default();
        let p = ModelParams::default();
        let w = WorldGeometry::default();
        let x = State::new(0.0, 0.0, 0.0, 8.0);
        let t = reward_terms(&cfg, &p, &x, 4.0, 4.0, false, &w);
        assert_eq!(t.torque, -1.0);
        assert_eq!(t.velocity, -4.0);
        assert_eq!(t.smoothness, 0.0);
        let t = reward_terms(&cfg, &p, &x, -2.0, 3.0, false, &w);
        assert_eq!(t.torque, 0.0);
        assert!((t.smoothness + 0.005).abs() < 1e-15);
    }

    #[test]
    fn zero_action_step_is_plain_rk4() {
        let mut env = env_with(quiet(), 1);
        let x0 = env.reset();
        let r = env.step(0.0).unwrap();
        let p = *env.params();
        let mut v = X0_BR.to_vector();
        for _ in 0..4 {
            v = rk4_step(&p, &v, 0.0, 1e-3).unwrap();
        }
        assert_eq!(x0, X0_BR.to_array());
        assert_eq!(r.observation, State::from_vector(&v).to_array());
    }

    #[test]
    fn episode_truncates_at_two_seconds() {
        let mut env = env_with(quiet(), 2);
        env.reset();
        let mut n = 0;
        let last = loop {
            let r = env.step(0.0).unwrap();
            n += 1;
            if r.terminated {
                break r;
            }
        };
        assert!(last.info.truncated, "{:?}", last.info);
        assert_eq!(n, 500);
        assert!(matches!(env.step(0.0), Err(Error::StepAfterTermination)));
    }

    #[test]
    fn reaching_target_terminates_with_bonus() {
        let mut cfg = quiet();
        let rc = RewardConfig::default();
        // Start a hair off the target, at rest; one step keeps it inside the tolerance.
        cfg.x0 = State::new(rc.q_target[0] + 0.01, rc.q_target[1], 0.0, 0.0);
        let mut env = env_with(cfg, 3);
        let r = env.step(0.0).unwrap();
        assert!(r.terminated && r.info.success);
        assert_eq!(r.info.terms.target, 30.0);
    }

    #[test]
    fn noise_sigma_matches_config() {
        let mut env = env_with(EnvConfig::default(), 4);
        env.reset();
        let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
        while n < 100_000 {
            let r = env.step(0.0).unwrap();
            let truth = r.info.state.to_array();
            for (o, s) in r.observation.iter().zip(truth) {
                let e = o - s;
                sum += e;
                sq += e * e;
                n += 1;
            }
            if r.terminated {
                env.reset();
            }
        }
        let mean = sum / n as f64;
        let sd = (sq / n as f64 - mean * mean).sqrt();
        assert!((sd / 0.025 - 1.0).abs() < 0.02, "sample sigma {sd}");
    }

    #[test]
    fn same_seed_same_observations() {
        let run = |seed| {
            let mut env = env_with(EnvConfig { init_sigma: [0.05; 4], ..EnvConfig::default() }, seed);
            (0..50).map(|k| env.step((k as f64 * 0.1).sin()).unwrap().observation).collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    fn constant_policy(torque: f64, opposite_arm: bool) -> PolicyArtifact {
        let mut a = PolicyArtifact::zero(3);
        a.layers[1].bias[0] = torque;
        a.opposite_arm = opposite_arm;
        a
    }

    #[test]
    fn policy_json_is_bit_exact() {
        let mut a = PolicyArtifact::zero(5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = Normal::new(0.0, 1.0).unwrap();
        for l in &mut a.layers {
            l.weights.iter_mut().flatten().chain(l.bias.iter_mut()).for_each(|w| *w = n.sample(&mut rng) / 3.0);
        }
        a.input_mean = vec![0.1, -0.2, 1e-17, 3.0];
        a.output_scale = std::f64::consts::PI;
        let back = PolicyArtifact::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
        let bits = |p: &PolicyArtifact| p.layers.iter().flat_map(|l| l.weights.iter().flatten().chain(&l.bias)).map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&a));
    }

    #[test]
    fn malformed_policies_rejected() {
        let mut a = PolicyArtifact::zero(4);
        a.layers[0].weights[2].pop();
        assert!(matches!(a.validate(), Err(Error::Policy(_))));
        let mut a = PolicyArtifact::zero(4);
        a.sizes = vec![4, 4, 2];
        assert!(a.validate().is_err());
        assert!(PolicyArtifact::from_json("{\"sizes\": [4, 1]}").is_err());
        let mut a = PolicyArtifact::zero(4);
        a.layers[0].activation = Activation::Relu;
        assert!(PolicyArtifact::from_json(&a.to_json().replace("relu", "softsign")).is_err());
    }

    #[test]
    fn forward_pass_by_hand() {
        let a = PolicyArtifact {
            sizes: vec![4, 2, 1],
            input_mean: vec![1.0, 0.0, 0.0, 0.0],
            input_scale: vec![2.0, 1.0, 1.0, 1.0],
            layers: vec![
                Layer { weights: vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, -1.0, 0.0, 0.0]], bias: vec![0.0, 0.5], activation: Activation::Relu },
                Layer { weights: vec![vec![2.0, 3.0]], bias: vec![0.1], activation: Activation::Tanh },
            ],
            output_scale: 4.0,
            opposite_arm: false,
        };
        // hidden = relu([(3-1)/2, -2 + 0.5]) = [1, 0]
        let want = 4.0 * (2.0f64 + 0.1).tanh();
        assert_eq!(a.act(&[3.0, 2.0, 0.0, 0.0]), want);
    }

    #[test]
    fn opposite_arm_scales_actions() {
        let env = quiet();
        let plain = constant_policy(1.0, false);
        let flipped = constant_policy(1.0, true);
        let x = X0_BR;
        assert_eq!(PolicyController::new(&plain, &env).torque(&x, 0.0), 1.0);
        assert_eq!(PolicyController::new(&flipped, &env).torque(&x, 0.0), 0.92);

        let mut e = env_with(env.clone(), 0);
        let ep = run_episode(&flipped, &mut e, 0.92).unwrap();
        let mut manual = env_with(env, 0);
        manual.reset();
        let mut energy = 0.0;
        for _ in 0..ep.steps {
            energy += manual.step(0.92).unwrap().info.energy;
        }
        assert_eq!(energy, ep.energy);
    }

    #[test]
    fn zero_policy_never_succeeds() {
        let cfg = EnvConfig { init_sigma: [0.02, 0.02, 0.05, 0.05], ..EnvConfig::default() };
        let s = evaluate_policy(&PolicyArtifact::zero(8), &ModelParams::default(), &cfg, &RewardConfig::default(), &WorldGeometry::default(), 100, 5, Execution::Parallel).unwrap();
        assert_eq!(s.success_rate, 0.0);
        assert_eq!(s.mean_energy, 0.0);
        let again = evaluate_policy(&PolicyArtifact::zero(8), &ModelParams::default(), &cfg, &RewardConfig::default(), &WorldGeometry::default(), 100, 5, Execution::Sequential).unwrap();
        assert_eq!(s, again);
    }

    /// Knots every 10 ms with linearly interpolated torque, integrated at the
    /// same step the replay uses.
    fn synthetic_recording(b_pivot: f64, b_motor: f64, torque: impl Fn(f64) -> f64) -> Trajectory {
        let p = ModelParams::default().with_damping(b_pivot, b_motor);
        let (knot_dt, sub) = (0.01, 10);
        let mut x = State::new(-0.4, 0.9, 0.0, 0.0).to_vector();
        let mut knots = Vec::new();
        for k in 0..=150 {
            let t = k as f64 * knot_dt;
            knots.push(Knot { t, state: State::from_vector(&x), u: torque(t) });
            let (u0, u1) = (torque(t), torque(t + knot_dt));
            let h = knot_dt / sub as f64;
            for i in 0..sub {
                let s = i as f64 / sub as f64;
                let at = |f: f64| u0 + (s + f / sub as f64) * (u1 - u0);
                x = rk4_step_varying(&p, &x, at(0.0), at(0.5), at(1.0), h).unwrap();
            }
        }
        Trajectory::new(&p, knots).unwrap()
    }

    #[test]
    fn calibration_recovers_damping() {
        let rec = synthetic_recording(0.044, 0.06, |t| 1.5 * (3.0 * t).sin());
        let (bp, bm) = calibrate_damping(&ModelParams::default(), &rec, &CalibrationOptions::default(), Execution::Parallel).unwrap();
        assert!((bp - 0.044).abs() < 0.005 && (bm - 0.06).abs() < 0.005, "({bp}, {bm})");
    }

    #[test]
    fn calibration_finds_zero_damping() {
        let rec = synthetic_recording(0.0, 0.0, |t| (5.0 * t).cos());
        let (bp, bm) = calibrate_damping(&ModelParams::default(), &rec, &CalibrationOptions::default(), Execution::Sequential).unwrap();
        assert!(bp < 0.005 && bm < 0.005, "({bp}, {bm})");
    }

    #[test]
    fn calibration_under_saturated_torque() {
        let rec = synthetic_recording(0.1, 0.03, |_| MOTOR_TORQUE_LIMIT);
        let (bp, bm) = calibrate_damping(&ModelParams::default(), &rec, &CalibrationOptions::default(), Execution::Parallel).unwrap();
        assert!((bp - 0.1).abs() < 0.005 && (bm - 0.03).abs() < 0.005, "({bp}, {bm})");
    }

    #[test]
    fn calibration_rejects_bad_recordings() {
        let p = ModelParams::default();
        let idle = synthetic_recording(0.044, 0.06, |_| 0.0);
        assert!(matches!(calibrate_damping(&p, &idle, &CalibrationOptions::default(), Execution::Sequential), Err(Error::DegenerateRecording)));
        let short = Trajectory::uniform(&p, 0.5, &[X0_BR, X0_BR], &[1.0, 1.0]).unwrap();
        assert!(matches!(calibrate_damping(&p, &short, &CalibrationOptions::default(), Execution::Sequential), Err(Error::InvalidTrajectory(_))));
    }
}
