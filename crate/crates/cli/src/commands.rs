use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use brachiation::distill::{distill, Teacher};
use brachiation::maneuvers::ReleaseSpec;
use brachiation::par::{self, Execution};
use brachiation::rl_env::{calibrate_damping, evaluate_policy, CalibrationOptions, EnvConfig, PolicyArtifact, RewardConfig};
use brachiation::sim::{
    compare_controllers, metrics_csv, metrics_table, rollout, summarize, ComparisonRow, Contender, Goal, Obstacles,
    PdController, SwingTrial, TvlqrController,
};
use brachiation::statemachine::{execute_plan, BehaviorPlan, ControllerKind, ExecOptions, Ladder, Library, Primitive, TrackedSwing};
use brachiation::rl_env::PolicyController;
use brachiation::trajectory::fmt_sig9;
use brachiation::trajopt::{self, Behavior};
use brachiation::{ModelParams, Trajectory};

use crate::config::RunConfig;
use crate::output::write_atomic;
use crate::Failure;

pub enum Target {
    Swing(Behavior),
    Plan(PathBuf),
}

pub fn parse_behaviors(names: &[String]) -> Result<Vec<Behavior>, Failure> {
    let mut out: Vec<Behavior> = Vec::new();
    for n in names {
        let b: Behavior = n.parse()?;
        if !out.contains(&b) {
            out.push(b);
        }
    }
    Ok(out)
}

fn exec(cfg: &RunConfig) -> Execution {
    if cfg.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn file_name(b: Behavior) -> String {
    format!("{}.csv", b.to_string().to_lowercase())
}

/// Nominals from `nominal_dir` when configured, otherwise solved here.
fn nominals(cfg: &RunConfig, params: &ModelParams, behaviors: &[Behavior]) -> Result<Vec<(Behavior, Trajectory)>, Failure> {
    if let Some(dir) = &cfg.nominal_dir {
        return behaviors
            .iter()
            .map(|&b| {
                let path = dir.join(file_name(b));
                let file = std::fs::File::open(&path).map_err(|e| {
                    Failure::Usage(format!(
                        "cannot read nominal {}: {e} (create it with `brachiate optimize --behavior {b} --out {}`)",
                        path.display(),
                        dir.display()
                    ))
                })?;
                let t = Trajectory::read_csv(params, BufReader::new(file))
                    .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
                Ok((b, t))
            })
            .collect();
    }
    let specs = behaviors.iter().map(|&b| cfg.spec(b)).collect::<Result<Vec<_>, _>>()?;
    let solved = par::map_slice(exec(cfg), &specs, |s| trajopt::solve(params, s, None));
    behaviors.iter().zip(solved).map(|(&b, s)| Ok((b, s?.trajectory))).collect()
}

fn policy(cfg: &RunConfig) -> Result<PolicyArtifact, Failure> {
    match &cfg.policy {
        Some(p) => Ok(PolicyArtifact::load(p)?),
        None => Ok(PolicyArtifact::bundled_bf()),
    }
}

pub fn optimize(cfg: &RunConfig, out: &Path, behaviors: &[Behavior]) -> Result<(), Failure> {
    let params = cfg.params()?;
    let specs = behaviors.iter().map(|&b| cfg.spec(b)).collect::<Result<Vec<_>, _>>()?;
    let results = par::map_slice(exec(cfg), &specs, |s| trajopt::solve(&params, s, None));
    let mut report = String::from("behavior,converged,strategy,iterations,objective,duration,max_defect,boundary_error,max_abs_input\n");
    let mut failed = Vec::new();
    for (&b, r) in behaviors.iter().zip(results) {
        match r {
            Ok(sol) => {
                let path = write_atomic(out, &file_name(b), &sol.trajectory.to_csv_string())?;
                let rep = &sol.report;
                let _ = writeln!(
                    report,
                    "{b},true,{:?},{},{},{},{},{},{}",
                    rep.strategy,
                    rep.iterations,
                    fmt_sig9(rep.objective),
                    fmt_sig9(rep.duration),
                    fmt_sig9(rep.max_defect),
                    fmt_sig9(rep.boundary_error),
                    fmt_sig9(sol.trajectory.max_abs_input()),
                );
                println!("{b}: T = {:.4} s, {} iterations -> {}", rep.duration, rep.iterations, path.display());
            }
            Err(e) => {
                let _ = writeln!(report, "{b},false,,,,,,,");
                eprintln!("{b}: {e}");
                failed.push(b.to_string());
            }
        }
    }
    write_atomic(out, "solve_report.csv", &report)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("not converged: {}", failed.join(", "))))
    }
}

pub fn synthesize(cfg: &RunConfig, out: &Path, behaviors: &[Behavior]) -> Result<(), Failure> {
    let params = cfg.params()?;
    for (b, nominal) in nominals(cfg, &params, behaviors)? {
        let gains = brachiation::tvlqr::synthesize(&params, &nominal, &cfg.tvlqr)?;
        let name = format!("{}_gains.csv", b.to_string().to_lowercase());
        let path = write_atomic(out, &name, &gains.to_csv_string())?;
        println!("{b}: {} gain samples -> {}", gains.times().len(), path.display());
    }
    Ok(())
}

fn behaviors_for(plan: &BehaviorPlan) -> Vec<Behavior> {
    let mut out = Vec::new();
    for b in plan.steps.iter().filter_map(|s| s.primitive.swing()) {
        if !out.contains(&b) {
            out.push(b);
        }
    }
    out
}

fn tracked(cfg: &RunConfig, params: &ModelParams, behaviors: &[Behavior]) -> Result<Vec<TrackedSwing>, Failure> {
    nominals(cfg, params, behaviors)?
        .into_iter()
        .map(|(b, n)| Ok(TrackedSwing::new(params, b, n, &cfg.tvlqr)?))
        .collect()
}

/// Default spread of single-swing start states: the release handoff spread
/// for swings out of double support, none from hanging.
fn start_sigma(cfg: &RunConfig, b: Behavior) -> [f64; 4] {
    cfg.start_sigma.unwrap_or(match b {
        Behavior::BF => ReleaseSpec::back().sigma0,
        Behavior::FB => ReleaseSpec::front().sigma0,
        Behavior::ZB | Behavior::ZF => [0.0; 4],
    })
}

fn swing_trial(cfg: &RunConfig, params: &ModelParams, s: &TrackedSwing) -> SwingTrial {
    let deadline = s.nominal.duration() + cfg.rollout.overtime;
    let goal = if s.behavior.forward() { Goal::front(&cfg.world, deadline) } else { Goal::back(&cfg.world, deadline) };
    SwingTrial {
        params: *params,
        x0: s.nominal.initial_state(),
        sigma0: start_sigma(cfg, s.behavior),
        goal,
        obstacles: Obstacles::around(&cfg.world),
        config: cfg.rollout,
        disturbances: cfg.disturbances.clone(),
        label: primitive(s.behavior),
    }
}

fn primitive(b: Behavior) -> Primitive {
    match b {
        Behavior::ZB => Primitive::ZB,
        Behavior::ZF => Primitive::ZF,
        Behavior::FB => Primitive::FB,
        Behavior::BF => Primitive::BF,
    }
}

fn no_policy_for(b: Behavior) -> Failure {
    Failure::Usage(format!("the RL controller only has a policy for BF, not {b}"))
}

fn contender<'a>(kind: ControllerKind, s: &'a TrackedSwing, cfg: &'a RunConfig, pol: &'a PolicyArtifact) -> Result<Contender<'a>, Failure> {
    let (n, g) = (&s.nominal, &s.gains);
    let make: Box<brachiation::sim::ControllerFactory<'a>> = match kind {
        ControllerKind::Pd => Box::new(move || Box::new(PdController { nominal: n, gains: cfg.pd })),
        ControllerKind::Tvlqr => Box::new(move || Box::new(TvlqrController::new(g, n))),
        ControllerKind::Rl if s.behavior == Behavior::BF => Box::new(move || Box::new(PolicyController { policy: pol, arm_scale: 1.0 })),
        ControllerKind::Rl => return Err(no_policy_for(s.behavior)),
    };
    Ok(Contender { name: kind.to_string(), make })
}

fn load_plan(path: &Path) -> Result<BehaviorPlan, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("plan file {} does not exist", path.display())));
    }
    Ok(BehaviorPlan::load(path)?)
}

fn exec_options(cfg: &RunConfig, seed: u64) -> ExecOptions {
    ExecOptions { rollout: cfg.rollout, disturbances: cfg.disturbances.clone(), seed, ..ExecOptions::default() }
}

pub fn simulate(cfg: &RunConfig, out: &Path, target: &Target, kind: ControllerKind, perturb: bool) -> Result<(), Failure> {
    let params = cfg.params()?;
    let pol = policy(cfg)?;
    match target {
        Target::Swing(b) => {
            if kind == ControllerKind::Rl && *b != Behavior::BF {
                return Err(no_policy_for(*b));
            }
            let swings = tracked(cfg, &params, &[*b])?;
            let s = &swings[0];
            let trial = swing_trial(cfg, &params, s);
            let x0 = if perturb {
                let mut rng = brachiation::sim::repetition_rng(cfg.seed, 0);
                brachiation::sim::perturbed_start(&trial.x0, &trial.sigma0, &mut rng)
            } else {
                trial.x0
            };
            let c = contender(kind, s, cfg, &pol)?;
            let mut ctl = (c.make)();
            let run = rollout(&params, ctl.as_mut(), &x0, &trial.goal, &trial.obstacles, &trial.config, &trial.disturbances, trial.label)?;
            let path = write_atomic(out, "trace.csv", &run.trace.to_csv_string())?;
            println!(
                "{b} with {kind}: {:?} after {:.3} s, energy {:.3} J -> {}",
                run.outcome,
                run.metrics.duration,
                run.metrics.energy,
                path.display()
            );
            Ok(())
        }
        Target::Plan(p) => {
            let mut plan = load_plan(p)?;
            plan.controller = kind;
            let swings = tracked(cfg, &params, &behaviors_for(&plan))?;
            let lib = Library::tracking(&swings, &cfg.pd, Some(&pol));
            let ladder = Ladder { world: cfg.world, ..Ladder::default() };
            let run = execute_plan(&params, &plan, &ladder, &lib, &exec_options(cfg, cfg.seed))?;
            let path = write_atomic(out, "trace.csv", &run.trace.to_csv_string())?;
            match &run.abort {
                None => println!("plan completed in {:.3} s, energy {:.3} J -> {}", run.report.duration, run.report.energy, path.display()),
                Some((i, why)) => println!("plan aborted at step {i}: {why} -> {}", path.display()),
            }
            Ok(())
        }
    }
}

pub fn benchmark(cfg: &RunConfig, out: &Path, target: &Target) -> Result<(), Failure> {
    let params = cfg.params()?;
    let pol = policy(cfg)?;
    let reps = cfg.repetitions;
    let rows: Vec<ComparisonRow> = match target {
        Target::Swing(b) => {
            if reps == 0 {
                Vec::new()
            } else {
                let swings = tracked(cfg, &params, &[*b])?;
                let s = &swings[0];
                let contenders = cfg.controllers.iter().map(|&k| contender(k, s, cfg, &pol)).collect::<Result<Vec<_>, _>>()?;
                compare_controllers(&swing_trial(cfg, &params, s), &contenders, reps, cfg.seed, exec(cfg))
            }
        }
        Target::Plan(p) => {
            let plan = load_plan(p)?;
            if reps == 0 {
                Vec::new()
            } else {
                let swings = tracked(cfg, &params, &behaviors_for(&plan))?;
                let lib = Library::tracking(&swings, &cfg.pd, Some(&pol));
                let ladder = Ladder { world: cfg.world, ..Ladder::default() };
                let mut rows = Vec::new();
                for &kind in &cfg.controllers {
                    let mut plan = plan.clone();
                    plan.controller = kind;
                    plan.steps.iter_mut().for_each(|s| s.controller = None);
                    lib.check(&plan)?;
                    let runs = par::map_indices(exec(cfg), reps, |r| {
                        execute_plan(&params, &plan, &ladder, &lib, &exec_options(cfg, cfg.seed + r as u64)).ok().map(|run| run.report)
                    });
                    rows.push(summarize(kind.as_str(), &runs));
                }
                rows
            }
        }
    };
    write_atomic(out, "metrics.csv", &metrics_csv(&rows))?;
    write_atomic(out, "metrics.txt", &metrics_table(&rows))?;
    if rows.is_empty() {
        println!("no repetitions requested; wrote empty tables to {}", out.display());
    }
    for r in &rows {
        println!(
            "{}: {}/{} succeeded, energy {:.3} J, max torque {:.3} N·m",
            r.controller, r.successes, r.repetitions, r.mean.energy, r.mean.max_abs_torque
        );
    }
    Ok(())
}

pub fn distill_policy(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let params = cfg.params()?;
    let swings = tracked(cfg, &params, &[Behavior::BF])?;
    let s = &swings[0];
    let teacher = Teacher { gain: &s.gains, nominal: &s.nominal };
    let env = EnvConfig { x0: s.nominal.initial_state(), init_sigma: ReleaseSpec::back().sigma0, ..EnvConfig::default() };
    let reward = RewardConfig::default();
    let mut dcfg = cfg.distill.clone();
    dcfg.seed = cfg.seed;
    let (policy, rounds) = distill(&params, &teacher, &env, &reward, &cfg.world, &dcfg, exec(cfg))?;
    for r in &rounds {
        println!("round {}: {} samples, torque MSE {:.2e}, {} teacher-mixed episodes succeeded", r.round, r.samples, r.loss, r.successes);
    }
    let stats = evaluate_policy(&policy, &params, &env, &reward, &cfg.world, 100, cfg.seed, exec(cfg))?;
    println!(
        "evaluation: success {:.0}%, mean return {:.2}, mean energy {:.3} J",
        100.0 * stats.success_rate,
        stats.mean_return,
        stats.mean_energy
    );
    let path = write_atomic(out, "bf_policy.json", &(policy.to_json() + "\n"))?;
    println!("-> {}", path.display());
    Ok(())
}

pub fn calibrate(cfg: &RunConfig, out: &Path, recording: &Path) -> Result<(), Failure> {
    let params = cfg.params()?;
    let file = std::fs::File::open(recording)
        .map_err(|e| Failure::Usage(format!("cannot read recording {}: {e}", recording.display())))?;
    let rec = Trajectory::read_csv(&params, BufReader::new(file))?;
    let (b_pivot, b_motor) = calibrate_damping(&params, &rec, &CalibrationOptions::default(), exec(cfg))?;
    let text = format!("b_pivot = {}\nb_motor = {}\n", fmt_sig9(b_pivot), fmt_sig9(b_motor));
    let path = write_atomic(out, "damping.toml", &text)?;
    println!("b_pivot = {b_pivot:.4}, b_motor = {b_motor:.4} -> {}", path.display());
    Ok(())
}
