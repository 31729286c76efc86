//! Direct-collocation trajectory optimization of the atomic swing behaviors.

mod collocation;
pub mod nlp;
pub mod qp;
pub mod sqp;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DVector, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

pub use collocation::Collocation;

use crate::dynamics::{ModelParams, State};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;
use nlp::Nlp;
use sqp::{SqpOptions, SqpStatus};

/// Mean handoff state after the back release.
pub const X0_BR: State = State::new(-0.63, -1.87, -0.63, 1.45);
/// Mean handoff state after the front release.
pub const X0_FR: State = State::new(0.51, 2.21, -0.63, 4.68);
/// Final state of the swings that end on the back bar.
pub const XF_BACK: State = State::new(-0.55, -1.97, -0.5, -3.0);
/// Final state of the swings that end on the front bar.
pub const XF_FRONT: State = State::new(0.73, 1.92, -3.0, -2.5);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajOptConfig {
    /// Number of knots.
    pub n: usize,
    /// Weight on the final time.
    pub w: f64,
    /// Running state cost, row-major.
    pub q: [[f64; 4]; 4],
    pub r: f64,
    pub x_lim: [f64; 4],
    pub u_lim: f64,
    pub t_bounds: (f64, f64),
}

impl Default for TrajOptConfig {
    fn default() -> Self {
        Self {
            n: 20,
            w: 0.0,
            q: [[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
            r: 100.0,
            x_lim: [2.09, 2.88, 10.0, 10.0],
            u_lim: 3.0,
            t_bounds: (0.3, 3.0),
        }
    }
}

impl TrajOptConfig {
    pub fn q_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.q[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.n < 3 {
            return bad("need at least 3 knots");
        }
        if !(self.r > 0.0) || !(self.w >= 0.0) {
            return bad("R must be positive and W non-negative");
        }
        let q = self.q_matrix();
        if (q - q.transpose()).amax() > 1e-12 || q.symmetric_eigenvalues().min() < -1e-12 {
            return bad("Q must be symmetric positive semidefinite");
        }
        if !(self.u_lim > 0.0) || self.x_lim.iter().any(|v| !(*v > 0.0)) {
            return bad("limits must be positive");
        }
        let (lo, hi) = self.t_bounds;
        if !(lo > 0.0 && hi >= lo) {
            return bad("horizon bounds must satisfy 0 < T_min <= T_max");
        }
        Ok(())
    }
}

/// Bars in the frame of the support pivot, which sits on the middle bar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldGeometry {
    pub gap: f64,
    pub r_bar: f64,
}

impl Default for WorldGeometry {
    fn default() -> Self {
        Self { gap: 0.34, r_bar: 0.02 }
    }
}

impl WorldGeometry {
    pub fn back_bar(&self) -> Vector2<f64> {
        Vector2::new(-self.gap, 0.0)
    }

    pub fn front_bar(&self) -> Vector2<f64> {
        Vector2::new(self.gap, 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Behavior {
    ZB,
    ZF,
    FB,
    BF,
}

impl Behavior {
    pub const ALL: [Behavior; 4] = [Behavior::ZB, Behavior::ZF, Behavior::FB, Behavior::BF];

    /// True for swings that end on the front bar.
    pub fn forward(self) -> bool {
        matches!(self, Behavior::ZF | Behavior::BF)
    }

    pub fn target_bar(self, world: &WorldGeometry) -> Vector2<f64> {
        if self.forward() {
            world.front_bar()
        } else {
            world.back_bar()
        }
    }

    /// The stock spec of this behavior.
    pub fn spec(self) -> BehaviorSpec {
        let (x0, xf, w) = match self {
            Behavior::ZB => (State::default(), XF_BACK, 0.0),
            Behavior::ZF => (State::default(), XF_FRONT, 50.0),
            Behavior::FB => (X0_FR, XF_BACK, 0.0),
            Behavior::BF => (X0_BR, XF_FRONT, 50.0),
        };
        BehaviorSpec {
            behavior: self,
            x0,
            xf,
            config: TrajOptConfig { w, ..Default::default() },
            world: WorldGeometry::default(),
        }
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Behavior::ZB => "ZB",
            Behavior::ZF => "ZF",
            Behavior::FB => "FB",
            Behavior::BF => "BF",
        })
    }
}

impl FromStr for Behavior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ZB" => Ok(Behavior::ZB),
            "ZF" => Ok(Behavior::ZF),
            "FB" => Ok(Behavior::FB),
            "BF" => Ok(Behavior::BF),
            _ => Err(Error::InvalidSpec(format!("unknown behavior {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorSpec {
    pub behavior: Behavior,
    pub x0: State,
    pub xf: State,
    #[serde(default)]
    pub config: TrajOptConfig,
    #[serde(default)]
    pub world: WorldGeometry,
}

impl BehaviorSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if !(self.world.gap > 0.0 && self.world.r_bar > 0.0) {
            return Err(Error::InvalidSpec("bar gap and radius must be positive".into()));
        }
        for (name, x) in [("x0", self.x0), ("xf", self.xf)] {
            let v = x.to_array();
            if let Some(j) = (0..4).find(|&j| !(v[j].abs() <= self.config.x_lim[j])) {
                return Err(Error::InvalidSpec(format!(
                    "{name}[{j}] = {} exceeds the state limit {}",
                    v[j], self.config.x_lim[j]
                )));
            }
        }
        Ok(())
    }
}

/// Builds the collocation NLP, rejecting specs whose boundary states
/// violate the state limits.
pub fn transcribe(params: &ModelParams, spec: &BehaviorSpec) -> Result<Collocation> {
    params.validate()?;
    spec.validate()?;
    Ok(Collocation::new(params, spec))
}

/// Straight line from `x0` to `xf` over one second with zero input.
pub fn initial_guess(params: &ModelParams, spec: &BehaviorSpec) -> Result<Trajectory> {
    let n = spec.config.n.max(2);
    let (a, b) = (spec.x0.to_vector(), spec.xf.to_vector());
    let states: Vec<State> =
        (0..n).map(|k| State::from_vector(&(a + (b - a) * (k as f64 / (n - 1) as f64)))).collect();
    Trajectory::uniform(params, 1.0, &states, &vec![0.0; n])
}

/// Linear joint path over `duration` with the matching constant joint rates.
fn kinematic_guess(params: &ModelParams, spec: &BehaviorSpec, duration: f64) -> Result<Trajectory> {
    let n = spec.config.n.max(2);
    let (a, b) = (spec.x0.to_vector(), spec.xf.to_vector());
    let rate = (b.fixed_rows::<2>(0) - a.fixed_rows::<2>(0)) / duration;
    let states: Vec<State> = (0..n)
        .map(|k| {
            let mut x = a + (b - a) * (k as f64 / (n - 1) as f64);
            x.fixed_rows_mut::<2>(2).copy_from(&rate);
            State::from_vector(&x)
        })
        .collect();
    Trajectory::uniform(params, duration, &states, &vec![0.0; n])
}

/// How a solution was reached.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// SQP straight from the seed.
    Direct,
    /// Feasibility phase on the longest horizon, then SQP from its result.
    FeasibilityFirst,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub status: SqpStatus,
    pub strategy: Strategy,
    pub iterations: usize,
    pub objective: f64,
    pub duration: f64,
    pub max_defect: f64,
    pub boundary_error: f64,
    /// Largest clearance violation (positive means inside a bar).
    pub max_clearance_violation: f64,
    pub merit_log: Vec<sqp::MeritStep>,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub trajectory: Trajectory,
    pub report: SolveReport,
}

/// Solver knobs for [`solve_with`].
#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub sqp: SqpOptions,
    /// Feasibility tolerance the returned trajectory is held to.
    pub tolerance: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { sqp: SqpOptions::default(), tolerance: 1e-6 }
    }
}

pub fn solve(params: &ModelParams, spec: &BehaviorSpec, seed: Option<&Trajectory>) -> Result<Solution> {
    solve_with(params, spec, seed, &SolveOptions::default())
}

pub fn solve_with(
    params: &ModelParams,
    spec: &BehaviorSpec,
    seed: Option<&Trajectory>,
    opts: &SolveOptions,
) -> Result<Solution> {
    let nlp = transcribe(params, spec)?;
    let guess = match seed {
        Some(t) => t.clone(),
        None => initial_guess(params, spec)?,
    };
    let direct_opts = SqpOptions { stall_window: DIRECT_STALL_WINDOW, ..opts.sqp.clone() };
    let direct = sqp::solve(&nlp, &seed_vector(&nlp, &guess), &direct_opts);
    if direct.values.violation_max() <= opts.tolerance {
        return finish(params, &nlp, direct, Strategy::Direct, opts.tolerance);
    }

    // Swings that must pump energy from rest often stall at a short,
    // infeasible horizon. Restart with a pure feasibility problem on the
    // longest allowed horizon, then optimize from the point it finds.
    let mut feas_spec = spec.clone();
    feas_spec.config.w = 0.0;
    feas_spec.config.q = [[0.0; 4]; 4];
    feas_spec.config.r = FEASIBILITY_EFFORT_WEIGHT;
    let feas_nlp = Collocation::new(params, &feas_spec);
    let stretched = seed_vector(&nlp, &kinematic_guess(params, spec, spec.config.t_bounds.1)?);
    let phase1 = sqp::solve(&feas_nlp, &stretched, &opts.sqp);
    if phase1.values.violation_max() > opts.tolerance {
        return finish(params, &nlp, direct, Strategy::Direct, opts.tolerance);
    }
    let phase2 = sqp::solve(&nlp, &phase1.z, &opts.sqp);
    finish(params, &nlp, phase2, Strategy::FeasibilityFirst, opts.tolerance)
}

/// Iterations without progress after which the direct attempt is abandoned.
const DIRECT_STALL_WINDOW: usize = 60;

/// Effort weight of the feasibility phase; keeps its Hessian well posed.
const FEASIBILITY_EFFORT_WEIGHT: f64 = 1e-6;

fn finish(params: &ModelParams, nlp: &Collocation, result: sqp::SqpResult, strategy: Strategy, tolerance: f64) -> Result<Solution> {
    let trajectory = decode(params, nlp, &result.z)?;
    let n = nlp.knots();
    let eq = &result.values.eq;
    let violation = result.values.violation_max();
    let report = SolveReport {
        status: result.status,
        strategy,
        iterations: result.iterations,
        objective: result.values.objective,
        duration: result.z[0],
        max_defect: eq.rows(0, 4 * (n - 1)).amax(),
        boundary_error: eq.rows(4 * (n - 1), 8).amax(),
        max_clearance_violation: result.values.ineq.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)),
        merit_log: result.merit_log,
    };
    if violation <= tolerance {
        return Ok(Solution { trajectory, report });
    }
    let best = Box::new(trajectory);
    Err(match result.status {
        SqpStatus::MaxIterations => Error::MaxIterations { iterations: result.iterations, violation, best },
        _ => Error::Infeasible { violation, best },
    })
}

fn seed_vector(nlp: &Collocation, guess: &Trajectory) -> DVector<f64> {
    let n = nlp.knots();
    let t_total = guess.duration();
    let (states, inputs): (Vec<Vector4<f64>>, Vec<f64>) = (0..n)
        .map(|k| {
            let t = t_total * k as f64 / (n - 1) as f64;
            (guess.state_at(t).to_vector(), guess.input_at(t))
        })
        .unzip();
    nlp.pack(t_total, &states, &inputs)
}

fn decode(params: &ModelParams, nlp: &Collocation, z: &DVector<f64>) -> Result<Trajectory> {
    let n = nlp.knots();
    let states: Vec<State> = (0..n).map(|k| State::from_vector(&nlp.state(z, k))).collect();
    let inputs: Vec<f64> = (0..n).map(|k| nlp.input(z, k)).collect();
    debug_assert_eq!(z.len(), nlp.num_vars());
    Trajectory::uniform(params, z[0], &states, &inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::rk4_step_varying;

    #[test]
    fn decision_vector_holds_duration_states_and_inputs() {
        let nlp = transcribe(&ModelParams::default(), &Behavior::BF.spec()).unwrap();
        assert_eq!(nlp.num_vars(), 1 + 4 * 20 + 20);
        assert_eq!(nlp.num_eq(), 4 * 19 + 8);
    }

    #[test]
    fn boundary_state_outside_limits_is_rejected() {
        let mut spec = Behavior::FB.spec();
        spec.x0.q2 = 2.9;
        assert!(matches!(transcribe(&ModelParams::default(), &spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn initial_guess_spans_the_boundary_states() {
        let p = ModelParams::default();
        let spec = Behavior::ZB.spec();
        let guess = initial_guess(&p, &spec).unwrap();
        let knots = guess.knots();
        assert_eq!(knots.len(), 20);
        assert_eq!(knots[0].state, State::default());
        assert_eq!(knots[19].state, XF_BACK);
        assert!(knots.windows(2).all(|w| w[1].t > w[0].t));
        assert!((guess.duration() - 1.0).abs() < 1e-12);

        let nlp = transcribe(&p, &spec).unwrap();
        let v = nlp.values(&seed_vector(&nlp, &guess));
        assert!(v.objective.is_finite());
        assert!(v.eq.iter().chain(v.ineq.iter()).all(|x| x.is_finite()));
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let p = ModelParams::default();
        for b in Behavior::ALL {
            let spec = b.spec();
            let nlp = transcribe(&p, &spec).unwrap();
            let mut z = seed_vector(&nlp, &kinematic_guess(&p, &spec, 1.3).unwrap());
            // move off the straight line so no term is trivially zero
            for (i, v) in z.iter_mut().enumerate().skip(1) {
                *v += 0.05 * ((i as f64) * 0.7).sin();
            }
            let worst = nlp::derivative_mismatch(&nlp, &z, 1e-6);
            assert!(worst < 1e-5, "{b}: {worst:e}");
        }
    }

    #[test]
    fn exact_rollout_has_vanishing_defects() {
        // short horizon so the collocation truncation error is negligible
        let p = ModelParams::default();
        let spec = Behavior::FB.spec();
        let nlp = transcribe(&p, &spec).unwrap();
        let n = nlp.knots();
        let duration = 0.05;
        let h = duration / (n - 1) as f64;
        let input = |t: f64| 0.4 + 0.8 * t / duration;
        let mut x = spec.x0.to_vector();
        let mut states = vec![x];
        let sub = 200;
        for k in 0..n - 1 {
            for s in 0..sub {
                let dt = h / sub as f64;
                let t = k as f64 * h + s as f64 * dt;
                // the input is linear, so its value at the step midpoint is exact for RK4
                x = rk4_step_varying(&p, &x, input(t), input(t + dt / 2.0), input(t + dt), dt).unwrap();
            }
            states.push(x);
        }
        let inputs: Vec<f64> = (0..n).map(|k| input(k as f64 * h)).collect();
        let v = nlp.values(&nlp.pack(duration, &states, &inputs));
        let defects = v.eq.rows(0, 4 * (n - 1)).amax();
        assert!(defects <= 1e-8, "{defects:e}");
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = Behavior::ZF.spec();
        let back = BehaviorSpec::from_toml_str(&spec.to_toml_string()).unwrap();
        assert_eq!(back, spec);
    }
}
