use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/assets")
}

fn brachiate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brachiate"))
        .args(args)
        .env_remove("BRACHIATE_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn config_with(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!("nominal_dir = {:?}\n{extra}", assets().display().to_string());
    std::fs::write(&path, text).unwrap();
    path
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn optimize_writes_one_row_per_knot_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&brachiate(&["optimize", "--behavior", "FB", "--out", d.to_str().unwrap()]));
    }
    let csv = String::from_utf8(read(a.join("fb.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 1 + 20);
    assert!(csv.starts_with("t,q1,q2,qd1,qd2,u\n"));
    assert_eq!(read(a.join("fb.csv")), read(b.join("fb.csv")));
    assert_eq!(read(a.join("solve_report.csv")), read(b.join("solve_report.csv")));
}

#[test]
fn knot_flag_beats_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = config_with(tmp.path(), "knots = 12\n");
    let out = tmp.path().join("o");
    ok(&brachiate(&["--config", cfg.to_str().unwrap(), "optimize", "--behavior", "FB", "--knots", "15", "--out", out.to_str().unwrap()]));
    assert_eq!(String::from_utf8(read(out.join("fb.csv"))).unwrap().lines().count(), 16);
}

#[test]
fn unknown_behavior_is_a_usage_error() {
    let out = brachiate(&["optimize", "--behavior", "QQ", "--out", "/nonexistent-unused"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("QQ"));
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(brachiate(&["simulate", "--behavior", "BF", "--plan", "x.toml"]).status.code(), Some(2));
    assert_eq!(brachiate(&["benchmark", "--behavior", "BF", "--controllers", "MPC"]).status.code(), Some(2));
    assert_eq!(brachiate(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn tvlqr_bf_swing_ends_in_grasp() {
    let tmp = TempDir::new().unwrap();
    let cfg = config_with(tmp.path(), "");
    let out = tmp.path().join("o");
    let stdout = ok(&brachiate(&["--config", cfg.to_str().unwrap(), "simulate", "--behavior", "BF", "--controller", "TVLQR", "--out", out.to_str().unwrap()]));
    assert!(stdout.contains("Grasped"), "{stdout}");
    let trace = String::from_utf8(read(out.join("trace.csv"))).unwrap();
    assert!(trace.starts_with("t,q1,q2,qd1,qd2,u,E_cum,primitive\n"));
    assert!(trace.lines().last().unwrap().ends_with(",BF"));
}

#[test]
fn seeded_simulation_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = config_with(tmp.path(), "");
    let run = |dir: &str, seed: &str| {
        let out = tmp.path().join(dir);
        ok(&brachiate(&[
            "--config", cfg.to_str().unwrap(), "--seed", seed, "simulate", "--behavior", "BF", "--controller", "PD",
            "--perturb", "--impulse", "-0.5", "--out", out.to_str().unwrap(),
        ]));
        read(out.join("trace.csv"))
    };
    let a = run("a", "11");
    assert_eq!(a, run("b", "11"));
    assert_ne!(a, run("c", "12"));
}

#[test]
fn output_dir_from_environment_and_flag_precedence() {
    let tmp = TempDir::new().unwrap();
    let cfg = config_with(tmp.path(), "");
    let env_dir = tmp.path().join("env");
    let flag_dir = tmp.path().join("flag");
    let run = |extra: &[&str]| {
        let mut args = vec!["--config", cfg.to_str().unwrap(), "synthesize", "--behavior", "FB"];
        args.extend_from_slice(extra);
        Command::new(env!("CARGO_BIN_EXE_brachiate")).args(&args).env("BRACHIATE_OUT_DIR", &env_dir).output().unwrap()
    };
    ok(&run(&[]));
    assert!(env_dir.join("fb_gains.csv").exists());
    ok(&run(&["--out", flag_dir.to_str().unwrap()]));
    assert!(flag_dir.join("fb_gains.csv").exists());
    assert_eq!(read(env_dir.join("fb_gains.csv")), read(flag_dir.join("fb_gains.csv")));
}

#[test]
fn zero_repetitions_give_an_empty_table() {
    let tmp = TempDir::new().unwrap();
    let cfg = config_with(tmp.path(), "");
    let out = tmp.path().join("o");
    ok(&brachiate(&["--config", cfg.to_str().unwrap(), "benchmark", "--behavior", "BF", "--reps", "0", "--out", out.to_str().unwrap()]));
    let csv = String::from_utf8(read(out.join("metrics.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn missing_nominal_names_the_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, format!("nominal_dir = {:?}\n", tmp.path().display().to_string())).unwrap();
    let out = brachiate(&["--config", cfg.to_str().unwrap(), "benchmark", "--behavior", "BF", "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bf.csv"), "{err}");
}

#[test]
fn plan_benchmark_is_deterministic_across_thread_modes() {
    let tmp = TempDir::new().unwrap();
    let cfg = config_with(tmp.path(), "");
    let plan = tmp.path().join("plan.toml");
    std::fs::write(&plan, "start = \"B\"\ncontroller = \"PD\"\n\n[[steps]]\nprimitive = \"BR\"\n\n[[steps]]\nprimitive = \"BF\"\n\n[[steps]]\nprimitive = \"FC\"\n").unwrap();
    let run = |dir: &str, seq: bool| {
        let out = tmp.path().join(dir);
        let mut args = vec!["--config", cfg.to_str().unwrap(), "benchmark", "--plan", plan.to_str().unwrap(), "--controllers", "PD", "TVLQR", "RL", "--reps", "3", "--out", out.to_str().unwrap()];
        if seq {
            args.push("--sequential");
        }
        let stdout = ok(&brachiate(&args));
        (read(out.join("metrics.csv")), read(out.join("metrics.txt")), stdout)
    };
    let (csv, txt, stdout) = run("a", false);
    assert_eq!(run("b", true).0, csv);
    assert_eq!(run("c", false).1, txt);
    let table = String::from_utf8(txt).unwrap();
    assert!(table.contains("Success (%)"));
    assert_eq!(stdout.lines().count(), 3);
}

#[test]
fn calibration_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let cfg = config_with(tmp.path(), "");
    let rec = assets().join("zf.csv");
    let run = |dir: &str| {
        let out = tmp.path().join(dir);
        ok(&brachiate(&["--config", cfg.to_str().unwrap(), "calibrate", "--recording", rec.to_str().unwrap(), "--out", out.to_str().unwrap()]));
        read(out.join("damping.toml"))
    };
    assert_eq!(run("a"), run("b"));
    // Under a second of data is refused.
    let short = brachiate(&["calibrate", "--recording", assets().join("fb.csv").to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(short.status.code(), Some(2));
}

#[test]
fn small_distillation_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let cfg = config_with(tmp.path(), "[distill]\nhidden = [6]\nrounds = 1\nepisodes_per_round = 2\nepochs = 1\n");
    let run = |dir: &str| {
        let out = tmp.path().join(dir);
        ok(&brachiate(&["--config", cfg.to_str().unwrap(), "--seed", "4", "distill-policy", "--out", out.to_str().unwrap()]));
        read(out.join("bf_policy.json"))
    };
    assert_eq!(run("a"), run("b"));
}
