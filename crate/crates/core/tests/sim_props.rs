mod common;

use brachiation::dynamics::State;
use brachiation::sim::{rollout, Controller, Goal, Obstacles, OpenLoop, PdController, Rollout, RolloutConfig, Trace};
use brachiation::pd::PdGains;
use brachiation::statemachine::Primitive;
use brachiation::trajopt::{Behavior, WorldGeometry};
use brachiation::ModelParams;
use proptest::prelude::*;

/// Replays a fixed torque sequence, one value per control tick.
struct Scripted(Vec<f64>, usize);

impl Controller for Scripted {
    fn name(&self) -> &str {
        "scripted"
    }
    fn torque(&mut self, _x: &State, _t: f64) -> f64 {
        let u = self.0[self.1 % self.0.len()];
        self.1 += 1;
        u
    }
}

fn free(p: &ModelParams, c: &mut dyn Controller, x0: &State, duration: f64, config: &RolloutConfig) -> Rollout {
    let w = WorldGeometry::default();
    rollout(p, c, x0, &Goal::Free { duration }, &Obstacles::around(&w), config, &[], Primitive::BF).unwrap()
}

#[test]
fn halving_the_step_barely_moves_the_terminal_state() {
    let p = ModelParams::default();
    let n = common::nominal(&p, Behavior::BF);
    let coarse = RolloutConfig { events: false, ..RolloutConfig::default() };
    let fine = RolloutConfig { dt: coarse.dt / 2.0, ..coarse };
    let a = free(&p, &mut OpenLoop(&n), &n.initial_state(), n.duration(), &coarse).final_state();
    let b = free(&p, &mut OpenLoop(&n), &n.initial_state(), n.duration(), &fine).final_state();
    let d = (a.to_vector() - b.to_vector()).norm();
    assert!(d <= 1e-5, "terminal states differ by {d:e}");
}

#[test]
fn same_inputs_same_trace() {
    let p = ModelParams::default();
    let n = common::nominal(&p, Behavior::BF);
    let w = WorldGeometry::default();
    let run = || {
        let mut c = PdController { nominal: &n, gains: PdGains::default() };
        rollout(&p, &mut c, &n.initial_state(), &Goal::front(&w, 1.5), &Obstacles::around(&w), &RolloutConfig::default(), &[], Primitive::BF)
            .unwrap()
    };
    let a = run();
    assert_eq!(a.trace.to_csv_string(), run().trace.to_csv_string());
}

#[test]
fn energy_adds_across_concatenated_segments() {
    let p = ModelParams::default();
    let cfg = RolloutConfig { events: false, ..RolloutConfig::default() };
    let script = vec![1.5, -2.0, 0.5, 3.0, -0.7];
    let x0 = State::new(-0.6, -1.9, 0.0, 0.0);
    // 0.3 s is a whole number of 4 ms ticks, so the split keeps the tick phase.
    let first = free(&p, &mut Scripted(script.clone(), 0), &x0, 0.3, &cfg);
    let ticks = (0.3f64 * cfg.control_rate).round() as usize;
    let second = free(&p, &mut Scripted(script.clone(), ticks), &first.final_state(), 0.4, &cfg);
    let whole = free(&p, &mut Scripted(script, 0), &x0, 0.7, &cfg);

    let mut joined = Trace::default();
    joined.extend_from(&first.trace);
    joined.extend_from(&second.trace);
    assert_eq!(joined.rows.len(), whole.trace.rows.len());
    assert!((first.trace.energy() + second.trace.energy() - joined.energy()).abs() < 1e-12);
    assert!((joined.energy() - whole.trace.energy()).abs() < 1e-9);
    for (r, s) in joined.rows.windows(2).map(|w| (w[0].energy, w[1].energy)) {
        assert!(s >= r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn torque_never_exceeds_the_clamp(script in prop::collection::vec(-40.0..40.0f64, 1..20), clamp in 0.5..6.0f64) {
        let p = ModelParams::default();
        let cfg = RolloutConfig { events: false, torque_clamp: clamp, ..RolloutConfig::default() };
        let r = free(&p, &mut Scripted(script, 0), &State::new(-0.6, -1.9, 0.0, 0.0), 0.2, &cfg);
        let logged = r.trace.rows.iter().fold(0.0f64, |m, row| m.max(row.u.abs()));
        prop_assert!(logged <= clamp);
        prop_assert_eq!(r.metrics.max_abs_torque, logged);
    }
}
