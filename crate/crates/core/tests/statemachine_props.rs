mod common;

use std::collections::{HashSet, VecDeque};

use brachiation::dynamics::{end_effector_velocity, forward_kinematics, total_energy, wrap_angle, State};
use brachiation::maneuvers::double_support_pose;
use brachiation::pd::PdGains;
use brachiation::sim::{rollout, Goal, Obstacles, Outcome, RolloutConfig, TvlqrController};
use brachiation::statemachine::{
    execute_plan, relabel, switch_support, transition, validate_plan, Arm, BehaviorPlan, BehaviorState, ControllerKind,
    ExecOptions, Label, Ladder, Library, Node, Primitive, TrackedSwing,
};
use brachiation::trajopt::{Behavior, WorldGeometry};
use brachiation::tvlqr::TvlqrConfig;
use brachiation::ModelParams;
use proptest::prelude::*;

use Primitive::*;

/// The behavior graph written out edge by edge, independent of `transition`.
const EDGES: [(&str, Primitive, &str); 8] = [
    ("hang", ZB, "at_back"),
    ("hang", ZF, "at_front"),
    ("double", BR, "off_back"),
    ("double", FR, "off_front"),
    ("off_back", BF, "at_front"),
    ("off_front", FB, "at_back"),
    ("at_back", BC, "double"),
    ("at_front", FC, "double"),
];

fn oracle_accepts(start: Label, steps: &[Primitive]) -> bool {
    let mut node = if start == Label::Z { "hang" } else { "double" };
    for &s in steps {
        match EDGES.iter().find(|(from, p, _)| *from == node && *p == s) {
            Some((_, _, to)) => node = to,
            None => return false,
        }
    }
    true
}

fn primitive() -> impl Strategy<Value = Primitive> {
    prop::sample::select(Primitive::PLANNABLE.to_vec())
}

fn label() -> impl Strategy<Value = Label> {
    prop::sample::select(vec![Label::Z, Label::B, Label::F])
}

fn state() -> impl Strategy<Value = State> {
    let a = -std::f64::consts::PI..std::f64::consts::PI;
    (a.clone(), a, -6.0..6.0f64, -6.0..6.0f64).prop_map(|(a, b, c, d)| State::new(a, b, c, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn plan_validation_matches_the_graph(start in label(), steps in prop::collection::vec(primitive(), 0..9)) {
        let plan = BehaviorPlan { start, ..BehaviorPlan::new(ControllerKind::Pd, &steps) };
        prop_assert_eq!(validate_plan(&plan).is_ok(), oracle_accepts(start, &steps));
    }

    #[test]
    fn relabeling_twice_is_the_identity(x in state()) {
        let back = relabel(&relabel(&x));
        prop_assert!((wrap_angle(back.q1 - x.q1)).abs() < 1e-12);
        prop_assert!((back.to_vector() - x.to_vector()).rows(1, 3).amax() < 1e-12);
    }

    #[test]
    fn new_hook_lands_on_the_old_pivot(x in state()) {
        // Both links have length l, so from the new pivot (the old hook) the
        // new hook sits at -EE and moves at -EE velocity.
        let p = ModelParams::default();
        let y = relabel(&x);
        let old = forward_kinematics(&p, x.q1, x.q2).end_effector;
        let new = forward_kinematics(&p, y.q1, y.q2).end_effector;
        prop_assert!((new + old).norm() < 1e-12);
        prop_assert!((end_effector_velocity(&p, &y) + end_effector_velocity(&p, &x)).norm() < 1e-12);
    }
}

#[test]
fn switching_support_walks_the_ladder() {
    let s = BehaviorState { label: Label::B, support_arm: Arm::A, pivot_bar_index: 3 };
    let x = State::new(0.4, -1.2, 0.0, 0.0);
    let (f, y) = switch_support(&s, &x).unwrap();
    assert_eq!((f.label, f.support_arm, f.pivot_bar_index), (Label::F, Arm::B, 2));
    assert_eq!(switch_support(&f, &y).unwrap().0, s);
    let collinear = relabel(&State::new(0.3, 0.0, 0.0, 0.0));
    assert!((collinear.q1 - wrap_angle(0.3 + std::f64::consts::PI)).abs() < 1e-15 && collinear.q2 == 0.0);
    assert!(switch_support(&BehaviorState { label: Label::Z, ..s }, &x).is_err());
}

#[test]
fn every_node_recovers_to_the_swing_cycle() {
    let nodes = [Node::Hanging, Node::Double, Node::ReleasedBack, Node::ReleasedFront, Node::ArrivedBack, Node::ArrivedFront];
    let reach = |from: Node| {
        let mut seen = HashSet::from([from]);
        let mut queue = VecDeque::from([from]);
        while let Some(n) = queue.pop_front() {
            for p in Primitive::PLANNABLE {
                if let Some(m) = transition(n, p) {
                    if seen.insert(m) {
                        queue.push_back(m);
                    }
                }
            }
        }
        seen
    };
    // A missed swing leaves the robot hanging; from there ZB or ZF must lead
    // back to every node of the cycle.
    let from_hanging = reach(Node::Hanging);
    for n in nodes.iter().filter(|&&n| n != Node::Hanging) {
        assert!(from_hanging.contains(n), "{n:?} unreachable after a fall");
    }
    assert!(transition(Node::Hanging, ZB).is_some() && transition(Node::Hanging, ZF).is_some());
}

fn tracked(p: &ModelParams) -> Vec<TrackedSwing> {
    Behavior::ALL.iter().map(|&b| TrackedSwing::new(p, b, common::nominal(p, b), &TvlqrConfig::default()).unwrap()).collect()
}

#[test]
fn swings_move_the_pivot_one_bar() {
    let p = ModelParams::default();
    let swings = tracked(&p);
    let pd = PdGains::default();
    let lib = Library::tracking(&swings, &pd, None);
    let ladder = Ladder { start_bar: 2, ..Ladder::default() };
    let opts = ExecOptions { handoff_noise: false, ..ExecOptions::default() };
    for (start, steps, shift) in [(Label::B, [BR, BF, FC], 1), (Label::F, [FR, FB, BC], -1)] {
        let plan = BehaviorPlan { start, ..BehaviorPlan::new(ControllerKind::Tvlqr, &steps) };
        let run = execute_plan(&p, &plan, &ladder, &lib, &opts).unwrap();
        assert!(run.completed(), "{:?}", run.abort);
        let swing = &run.steps[1];
        assert_eq!(swing.outcome, Some(Outcome::Grasped));
        assert_eq!(swing.after.pivot_bar_index - swing.before.pivot_bar_index, 0);
        assert_eq!(run.final_state.pivot_bar_index, 2 + shift);
    }
}

#[test]
fn grasp_and_switch_never_add_energy() {
    let p = ModelParams::default();
    let w = WorldGeometry::default();
    for s in tracked(&p) {
        let forward = s.behavior.forward();
        let goal = if forward { Goal::front(&w, s.nominal.duration() + 0.5) } else { Goal::back(&w, s.nominal.duration() + 0.5) };
        let mut c = TvlqrController::new(&s.gains, &s.nominal);
        // Only the grasp matters here, so nothing is in the way.
        let clear = Obstacles { bars: vec![], r_bar: w.r_bar };
        let r = rollout(&p, &mut c, &s.nominal.initial_state(), &goal, &clear, &RolloutConfig::default(), &[], BF).unwrap();
        assert_eq!(r.outcome, Outcome::Grasped, "{}", s.behavior);
        let bar = if forward { w.front_bar() } else { w.back_bar() };
        let seated = double_support_pose(&p, bar).unwrap();
        let (before, after) = (total_energy(&p, &r.final_state()), total_energy(&p, &seated));
        assert!(after <= before + 1e-9, "{}: grasp {before} -> {after}", s.behavior);
        let switched = total_energy(&p, &relabel(&seated));
        assert!(switched <= after + 1e-9, "{}: switch {after} -> {switched}", s.behavior);
    }
}

#[test]
fn empty_plan_runs_to_an_empty_log() {
    let p = ModelParams::default();
    let lib = Library::default();
    let run = execute_plan(&p, &BehaviorPlan::new(ControllerKind::Pd, &[]), &Ladder::default(), &lib, &ExecOptions::default()).unwrap();
    assert!(run.steps.is_empty() && run.completed());
    assert_eq!(run.report.duration, 0.0);
}
