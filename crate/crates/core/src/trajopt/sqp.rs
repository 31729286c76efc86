//! Line-search SQP with an ℓ1 exact-penalty merit function.
//!
//! Each iteration solves a convex QP model (Hessian of the Lagrangian,
//! either finite-differenced and projected onto the positive-definite cone,
//! or a damped BFGS approximation). The QP is posed in elastic form, so the
//! linearized constraint violation is penalized with the same ℓ1 weight as
//! the merit function and the subproblem is feasible even far from a
//! solution. Steps are confined to a box whose size follows the line search.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::nlp::{Derivatives, Nlp, Values};
use super::qp::{solve_qp_structured, QpOptions, QpProblem, QpStatus};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HessianMode {
    /// Central differences of the Lagrangian gradient, eigenvalues floored.
    FiniteDifference,
    /// Powell-damped BFGS.
    Bfgs,
}

#[derive(Clone, Debug)]
pub struct SqpOptions {
    pub max_iterations: usize,
    /// Max-norm constraint violation accepted as feasible.
    pub feasibility_tolerance: f64,
    /// Relative stationarity tolerance.
    pub optimality_tolerance: f64,
    pub hessian: HessianMode,
    /// Initial and largest half-width of the box the step is confined to.
    pub initial_radius: f64,
    pub max_radius: f64,
    /// Give up as infeasible once this many iterations pass without the
    /// best violation dropping by a tenth. Zero disables the check.
    pub stall_window: usize,
    pub qp: QpOptions,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 300,
            feasibility_tolerance: 1e-9,
            optimality_tolerance: 1e-6,
            hessian: HessianMode::FiniteDifference,
            initial_radius: 1.0,
            max_radius: 10.0,
            stall_window: 0,
            qp: QpOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SqpStatus {
    Converged,
    /// Feasible, but the line search could no longer make progress.
    Stalled,
    MaxIterations,
    /// No further progress toward feasibility.
    Infeasible,
}

/// Merit values before and after one accepted step, at the same penalty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeritStep {
    pub before: f64,
    pub after: f64,
    pub penalty: f64,
    pub step_length: f64,
}

#[derive(Clone, Debug)]
pub struct SqpResult {
    pub z: DVector<f64>,
    pub values: Values,
    pub status: SqpStatus,
    pub iterations: usize,
    pub merit_log: Vec<MeritStep>,
}

fn merit(v: &Values, rho: f64) -> f64 {
    v.objective + rho * v.violation_l1()
}

struct Multipliers {
    eq: DVector<f64>,
    ineq: DVector<f64>,
}

fn lagrangian_gradient(d: &Derivatives, m: &Multipliers) -> DVector<f64> {
    &d.gradient + d.eq_jacobian.transpose() * &m.eq + d.ineq_jacobian.transpose() * &m.ineq
}

fn fd_hessian<P: Nlp + ?Sized>(nlp: &P, z: &DVector<f64>, m: &Multipliers) -> DMatrix<f64> {
    let n = z.len();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let step = 1e-6 * (1.0 + z[j].abs());
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[j] += step;
        zm[j] -= step;
        let gp = lagrangian_gradient(&nlp.derivatives(&zp), m);
        let gm = lagrangian_gradient(&nlp.derivatives(&zm), m);
        h.set_column(j, &((gp - gm) / (2.0 * step)));
    }
    (&h + h.transpose()) * 0.5
}

fn project_positive_definite(h: DMatrix<f64>) -> DMatrix<f64> {
    let scale = h.amax().max(1.0);
    let floor = 1e-6 * scale;
    let eig = SymmetricEigen::new(h);
    let vals = eig.eigenvalues.map(|v| v.abs().max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn bfgs_update(h: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let hs = &*h * s;
    let shs = s.dot(&hs);
    if shs <= 1e-16 {
        return;
    }
    let sy = s.dot(y);
    let theta = if sy >= 0.2 * shs { 1.0 } else { 0.8 * shs / (shs - sy) };
    let r = y * theta + &hs * (1.0 - theta);
    let sr = s.dot(&r);
    if sr <= 1e-16 {
        return;
    }
    *h -= &hs * hs.transpose() / shs;
    *h += &r * r.transpose() / sr;
}

struct Step {
    d: DVector<f64>,
    mult: Multipliers,
    /// ℓ1 violation of the linearized constraints at the step.
    model_violation: f64,
}

/// Elastic QP subproblem inside the box `|d| <= radius`:
///
/// ```text
/// min  gᵀd + ½dᵀHd + ρ Σ(v + w) + ρ Σ t
/// s.t. c_E + J_E d = v - w,   c_I + J_I d <= t,   v, w, t >= 0
/// ```
///
/// It is always feasible, and its multipliers are bounded by `ρ`.
fn solve_subproblem(
    h: &DMatrix<f64>,
    d: &Derivatives,
    z: &DVector<f64>,
    bounds: (&DVector<f64>, &DVector<f64>),
    rho: f64,
    radius: f64,
    opts: &QpOptions,
) -> Option<Step> {
    let n = z.len();
    let me = d.eq_jacobian.nrows();
    let mi = d.ineq_jacobian.nrows();
    let ne = n + 2 * me + mi;

    // the objective is divided by rho so the elastic costs are unit size;
    // rho = inf gives the pure feasibility subproblem
    let scale = if rho.is_finite() { 1.0 / rho } else { 0.0 };
    let mut he = DMatrix::zeros(ne, ne);
    he.view_mut((0, 0), (n, n)).copy_from(&(h * scale));
    for i in 0..ne {
        he[(i, i)] += 1e-9;
    }
    let mut ce = DVector::from_element(ne, 1.0);
    ce.rows_mut(0, n).copy_from(&(&d.gradient * scale));
    let mut ae = DMatrix::zeros(me, ne);
    ae.view_mut((0, 0), (me, n)).copy_from(&d.eq_jacobian);
    for i in 0..me {
        ae[(i, n + i)] = -1.0;
        ae[(i, n + me + i)] = 1.0;
    }
    let mut ge = DMatrix::zeros(mi, ne);
    ge.view_mut((0, 0), (mi, n)).copy_from(&d.ineq_jacobian);
    for i in 0..mi {
        ge[(i, n + 2 * me + i)] = -1.0;
    }
    let mut le = DVector::zeros(ne);
    let mut ue = DVector::from_element(ne, f64::INFINITY);
    for i in 0..n {
        le[i] = (bounds.0[i] - z[i]).max(-radius);
        ue[i] = (bounds.1[i] - z[i]).min(radius);
    }
    let b = -&d.values.eq;
    let hv = -&d.values.ineq;
    let p = QpProblem { h: &he, c: &ce, a: &ae, b: &b, g: &ge, hv: &hv, lower: &le, upper: &ue };
    let sol = solve_qp_structured(&p, opts, n);
    if sol.status == QpStatus::Failed || !sol.x.iter().all(|v| v.is_finite()) {
        return None;
    }
    let step = sol.x.rows(0, n).into_owned();
    let model_violation = linearized_violation(d, &step);
    let unscale = if rho.is_finite() { rho } else { 0.0 };
    Some(Step {
        d: step,
        mult: Multipliers { eq: sol.y * unscale, ineq: sol.z * unscale },
        model_violation,
    })
}

fn linearized_violation(d: &Derivatives, step: &DVector<f64>) -> f64 {
    let e = &d.values.eq + &d.eq_jacobian * step;
    let i = &d.values.ineq + &d.ineq_jacobian * step;
    e.iter().map(|v| v.abs()).sum::<f64>() + i.iter().map(|v| v.max(0.0)).sum::<f64>()
}

fn clamp_to_bounds(z: &mut DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) {
    for i in 0..z.len() {
        z[i] = z[i].clamp(lower[i], upper[i]);
    }
}

/// Minimum-norm correction of the equality residual, used as a
/// second-order correction when the full step is rejected.
fn equality_correction(d: &Derivatives, eq_at_trial: &DVector<f64>) -> Option<DVector<f64>> {
    let a = &d.eq_jacobian;
    if a.nrows() == 0 {
        return None;
    }
    let aat = a * a.transpose();
    let w = aat.cholesky()?.solve(eq_at_trial);
    Some(-(a.transpose() * w))
}

const MAX_PENALTY: f64 = 1e8;

pub fn solve<P: Nlp + ?Sized>(nlp: &P, z0: &DVector<f64>, opts: &SqpOptions) -> SqpResult {
    let lower = nlp.lower_bounds();
    let upper = nlp.upper_bounds();
    let mut z = z0.clone();
    clamp_to_bounds(&mut z, &lower, &upper);

    let mut deriv = nlp.derivatives(&z);
    let n = z.len();
    let mut rho = 10.0_f64;
    let mut radius = opts.initial_radius;
    let mut bfgs = DMatrix::identity(n, n);
    let mut mult = Multipliers {
        eq: DVector::zeros(deriv.values.eq.len()),
        ineq: DVector::zeros(deriv.values.ineq.len()),
    };
    let mut merit_log = Vec::new();
    let mut best = (z.clone(), deriv.values.clone());
    let mut status = SqpStatus::MaxIterations;
    let mut iterations = 0;
    let mut last_progress = (0, deriv.values.violation_max());

    for it in 0..opts.max_iterations {
        iterations = it;
        let h = match opts.hessian {
            HessianMode::FiniteDifference => project_positive_definite(fd_hessian(nlp, &z, &mult)),
            HessianMode::Bfgs => bfgs.clone(),
        };
        let violation = deriv.values.violation_max();
        let violation_l1 = deriv.values.violation_l1();

        // steer the penalty so the step achieves a fair share of the
        // reduction in linearized violation that is possible in the box
        let mut step = solve_subproblem(&h, &deriv, &z, (&lower, &upper), rho, radius, &opts.qp);
        if let Some(s) = &step {
            if s.model_violation > 1e-10 * (1.0 + violation_l1) {
                let best_model = solve_subproblem(&h, &deriv, &z, (&lower, &upper), f64::INFINITY, radius, &opts.qp)
                    .map_or(s.model_violation, |f| f.model_violation);
                let achievable = violation_l1 - best_model;
                let mut current = step.take();
                while let Some(c) = &current {
                    if violation_l1 - c.model_violation >= 0.1 * achievable || rho >= MAX_PENALTY {
                        break;
                    }
                    rho = (rho * 10.0).min(MAX_PENALTY);
                    match solve_subproblem(&h, &deriv, &z, (&lower, &upper), rho, radius, &opts.qp) {
                        Some(next) => current = Some(next),
                        None => break,
                    }
                }
                step = current;
            }
        }
        let Some(step) = step else {
            status = if violation <= opts.feasibility_tolerance { SqpStatus::Stalled } else { SqpStatus::Infeasible };
            break;
        };

        let stationarity = (&h * &step.d).amax();
        if violation <= opts.feasibility_tolerance
            && stationarity <= opts.optimality_tolerance * (1.0 + deriv.gradient.amax())
        {
            status = SqpStatus::Converged;
            break;
        }

        let phi0 = merit(&deriv.values, rho);
        let slope = deriv.gradient.dot(&step.d) + rho * (step.model_violation - violation_l1);
        let slope = slope.min(-1e-14 * (1.0 + phi0.abs()));

        let mut accepted: Option<(DVector<f64>, Values, f64)> = None;
        // full step, then a second-order correction, then backtracking
        let trial = &z + &step.d;
        let vt = nlp.values(&trial);
        if merit(&vt, rho) <= phi0 + 1e-4 * slope {
            accepted = Some((trial, vt, 1.0));
        } else if let Some(corr) = equality_correction(&deriv, &vt.eq) {
            let mut soc = &trial + corr;
            clamp_to_bounds(&mut soc, &lower, &upper);
            let vs = nlp.values(&soc);
            if merit(&vs, rho) <= phi0 + 1e-4 * slope {
                accepted = Some((soc, vs, 1.0));
            }
        }
        let mut alpha = 1.0;
        while accepted.is_none() && alpha > 1e-3 {
            alpha *= 0.5;
            let trial = &z + &step.d * alpha;
            let vt = nlp.values(&trial);
            if merit(&vt, rho) <= phi0 + 1e-4 * alpha * slope {
                accepted = Some((trial, vt, alpha));
            }
        }

        let step_norm = step.d.amax();
        let Some((z_new, v_new, a)) = accepted else {
            // the model is poor this far out; retry from the same point
            radius = 0.1 * step_norm;
            if radius < 1e-10 {
                status = if violation <= opts.feasibility_tolerance { SqpStatus::Stalled } else { SqpStatus::Infeasible };
                break;
            }
            continue;
        };
        if a == 1.0 && step_norm >= 0.9 * radius {
            radius = (2.0 * radius).min(opts.max_radius);
        } else if a < 1.0 {
            radius = (a * step_norm).max(1e-6);
        }
        merit_log.push(MeritStep { before: phi0, after: merit(&v_new, rho), penalty: rho, step_length: a });

        let deriv_new = nlp.derivatives(&z_new);
        if opts.hessian == HessianMode::Bfgs {
            let s = &z_new - &z;
            let y = lagrangian_gradient(&deriv_new, &step.mult) - lagrangian_gradient(&deriv, &step.mult);
            bfgs_update(&mut bfgs, &s, &y);
        }
        z = z_new;
        deriv = deriv_new;
        mult = step.mult;
        iterations = it + 1;

        let (bv, cv) = (best.1.violation_max(), deriv.values.violation_max());
        if cv < bv || (cv <= opts.feasibility_tolerance && deriv.values.objective < best.1.objective) {
            best = (z.clone(), deriv.values.clone());
        }
        if cv < 0.9 * last_progress.1 {
            last_progress = (it, cv);
        } else if opts.stall_window > 0
            && it - last_progress.0 >= opts.stall_window
            && last_progress.1 > opts.feasibility_tolerance
        {
            status = SqpStatus::Infeasible;
            break;
        }
    }

    if status == SqpStatus::Converged || status == SqpStatus::Stalled {
        return SqpResult { z, values: deriv.values, status, iterations, merit_log };
    }
    SqpResult { z: best.0, values: best.1, status, iterations, merit_log }
}
