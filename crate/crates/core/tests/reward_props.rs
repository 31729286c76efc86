use brachiation::dynamics::State;
use brachiation::rl_env::{region_penalty, reward_terms, sided_region, RewardConfig};
use brachiation::trajopt::WorldGeometry;
use brachiation::ModelParams;
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const QD_MAX: f64 = 10.0;
const U_MAX: f64 = 6.0;

#[test]
fn step_reward_stays_inside_its_envelope() {
    let cfg = RewardConfig::default();
    let p = ModelParams::default();
    let w = WorldGeometry::default();
    // Worst cases assembled term by term from the weights.
    let tail = |v: f64, lim: f64| (v - lim).max(0.0).powi(2);
    let upper = cfg.above_radii.len() as f64 + cfg.config_weight + cfg.target_weight;
    let lower = -1.0 - 1.0 - cfg.below_weight - tail(U_MAX, cfg.u_lim) - tail(QD_MAX, cfg.vel_lim) - cfg.smooth_weight * 2.0 * U_MAX;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pi = std::f64::consts::PI;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1_000_000 {
        let x = State::new(
            rng.random_range(-pi..pi),
            rng.random_range(-pi..pi),
            rng.random_range(-QD_MAX..QD_MAX),
            rng.random_range(-QD_MAX..QD_MAX),
        );
        let u = rng.random_range(-U_MAX..U_MAX);
        let u_prev = rng.random_range(-U_MAX..U_MAX);
        let r = reward_terms(&cfg, &p, &x, u, u_prev, false, &w).total();
        assert!(r.is_finite());
        lo = lo.min(r);
        hi = hi.max(r);
    }
    assert!(lo >= lower && hi <= upper, "observed [{lo}, {hi}] against [{lower}, {upper}]");
}

#[test]
fn region_penalty_is_lipschitz_through_its_rim() {
    let bar = Vector2::new(0.34, 0.0);
    let d_max = 0.3;
    let n = 20_000;
    let h = 0.8 / n as f64;
    let mut prev = region_penalty(bar + Vector2::new(-0.4, 0.05), bar, d_max);
    for i in 1..=n {
        let p = bar + Vector2::new(-0.4 + i as f64 * h, 0.05);
        let g = region_penalty(p, bar, d_max);
        // |dg/dd| <= 2/d_max, and d moves at most h per sample.
        assert!((g - prev).abs() <= 2.0 / d_max * h + 1e-12, "jump at sample {i}");
        prev = g;
    }
    assert_eq!(region_penalty(bar + Vector2::new(d_max, 0.0), bar, d_max), 0.0);
}

#[test]
fn sided_region_jumps_only_at_the_separatrix() {
    let bar = Vector2::new(0.34, 0.0);
    let d_max = 0.3;
    let normal = Vector2::new(-1.7, 1.0);
    let along = Vector2::new(normal.y, -normal.x).normalize();
    let unit = normal.normalize();
    let samples = 20_000;

    // Parallel to the separatrix, on the penalized side: as smooth as g.
    let h = 0.6 / samples as f64;
    let offset = 0.02 * unit;
    let at = |i: usize| bar + offset + (-0.3 + i as f64 * h) * along;
    let mut prev = sided_region(at(0), bar, d_max, normal);
    for i in 1..=samples {
        let v = sided_region(at(i), bar, d_max, normal);
        assert!((v - prev).abs() <= 2.0 / d_max * h + 1e-12);
        prev = v;
    }

    // Across it, the only large step is at the line itself.
    let h = 0.2 / samples as f64;
    let across = |i: usize| bar + (-0.1 + i as f64 * h) * unit;
    let mut jumps = Vec::new();
    let mut prev = sided_region(across(0), bar, d_max, normal);
    for i in 1..=samples {
        let v = sided_region(across(i), bar, d_max, normal);
        if (v - prev).abs() > 2.0 / d_max * h + 1e-12 {
            jumps.push(i);
        }
        prev = v;
    }
    assert_eq!(jumps.len(), 1);
    let s = (across(jumps[0]) - bar).dot(&unit);
    assert!(s > 0.0 && s <= h + 1e-12);
}
