//! Hermite–Simpson transcription of one atomic behavior.
//!
//! Decision vector `z = [T, x_0 .. x_{N-1}, u_0 .. u_{N-1}]`. State and
//! input limits and the horizon bounds are variable bounds; dynamics
//! defects and boundary pinning are equalities; bar clearance is an
//! inequality at every knot and interval midpoint.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector, Matrix4, RowVector4, Vector2, Vector4};

use super::nlp::{Derivatives, Nlp, Values};
use super::BehaviorSpec;
use crate::dynamics::{end_effector_jacobian, forward_kinematics, linearize, state_derivative, ModelParams, State};

/// Fraction of the horizon after which the target bar clearance is dropped.
const APPROACH_FRACTION: f64 = 0.9;

pub struct Collocation {
    params: ModelParams,
    spec: BehaviorSpec,
    n: usize,
    /// (sample position in units of intervals, bar center)
    clearance: Vec<(f64, Vector2<f64>)>,
}

struct Point {
    f: Vector4<f64>,
    a: Matrix4<f64>,
    b: Vector4<f64>,
}

fn eval(params: &ModelParams, x: &Vector4<f64>, u: f64, with_jac: bool) -> Point {
    let nan = Vector4::from_element(f64::NAN);
    let f = state_derivative(params, x, u).unwrap_or(nan);
    let (a, b) = if with_jac {
        match linearize(params, &State::from_vector(x), u) {
            Ok(l) => (l.a, l.b),
            Err(_) => (Matrix4::from_element(f64::NAN), nan),
        }
    } else {
        (Matrix4::zeros(), Vector4::zeros())
    };
    Point { f, a, b }
}

impl Collocation {
    pub fn new(params: &ModelParams, spec: &BehaviorSpec) -> Self {
        let n = spec.config.n;
        let world = &spec.world;
        let target = spec.behavior.target_bar(world);
        let mut clearance = Vec::new();
        for pos in (0..2 * n - 1).map(|i| i as f64 / 2.0) {
            for bar in [world.back_bar(), world.front_bar()] {
                let is_target = (bar - target).norm() < 1e-12;
                if is_target && pos / (n - 1) as f64 > APPROACH_FRACTION {
                    continue;
                }
                clearance.push((pos, bar));
            }
        }
        Self { params: *params, spec: spec.clone(), n, clearance }
    }

    pub fn knots(&self) -> usize {
        self.n
    }

    pub fn num_eq(&self) -> usize {
        4 * (self.n - 1) + 8
    }

    pub fn num_ineq(&self) -> usize {
        self.clearance.len()
    }

    pub fn state(&self, z: &DVector<f64>, k: usize) -> Vector4<f64> {
        z.fixed_rows::<4>(1 + 4 * k).into_owned()
    }

    pub fn input(&self, z: &DVector<f64>, k: usize) -> f64 {
        z[1 + 4 * self.n + k]
    }

    fn xi(&self, k: usize) -> usize {
        1 + 4 * k
    }

    fn ui(&self, k: usize) -> usize {
        1 + 4 * self.n + k
    }

    /// Packs a duration, knot states and knot inputs into a decision vector.
    pub fn pack(&self, duration: f64, states: &[Vector4<f64>], inputs: &[f64]) -> DVector<f64> {
        let mut z = DVector::zeros(self.num_vars());
        z[0] = duration;
        for k in 0..self.n {
            z.fixed_rows_mut::<4>(self.xi(k)).copy_from(&states[k]);
            z[self.ui(k)] = inputs[k];
        }
        z
    }

    fn evaluate(&self, z: &DVector<f64>, with_jac: bool) -> (Values, Option<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)>) {
        let n = self.n;
        let nv = self.num_vars();
        let cfg = &self.spec.config;
        let q = cfg.q_matrix();
        let big_t = z[0];
        let h = big_t / (n - 1) as f64;
        let dh_dt = 1.0 / (n - 1) as f64;

        let xs: Vec<Vector4<f64>> = (0..n).map(|k| self.state(z, k)).collect();
        let us: Vec<f64> = (0..n).map(|k| self.input(z, k)).collect();
        let pts: Vec<Point> = (0..n).map(|k| eval(&self.params, &xs[k], us[k], with_jac)).collect();

        // running cost
        let mut objective = cfg.w * big_t;
        let mut grad = DVector::zeros(if with_jac { nv } else { 0 });
        for k in 0..n {
            let wk = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            let l = xs[k].dot(&(q * xs[k])) + cfg.r * us[k] * us[k];
            objective += h * wk * l;
            if with_jac {
                grad[0] += dh_dt * wk * l;
                let gx = q * xs[k] * (2.0 * h * wk);
                grad.fixed_rows_mut::<4>(self.xi(k)).add_assign(&gx);
                grad[self.ui(k)] += 2.0 * h * wk * cfg.r * us[k];
            }
        }
        if with_jac {
            grad[0] += cfg.w;
        }

        let mut eq = DVector::zeros(self.num_eq());
        let mut ineq = DVector::zeros(self.num_ineq());
        let mut je = DMatrix::zeros(if with_jac { self.num_eq() } else { 0 }, nv);
        let mut ji = DMatrix::zeros(if with_jac { self.num_ineq() } else { 0 }, nv);

        // midpoint states and their sensitivities, reused by clearance rows
        struct Mid {
            x: Vector4<f64>,
            dx_dxk: Matrix4<f64>,
            dx_dxk1: Matrix4<f64>,
            dx_duk: Vector4<f64>,
            dx_duk1: Vector4<f64>,
            dx_dh: Vector4<f64>,
        }
        let eye = Matrix4::identity();
        let mut mids = Vec::with_capacity(n - 1);
        for k in 0..n - 1 {
            let (p0, p1) = (&pts[k], &pts[k + 1]);
            let xc = (xs[k] + xs[k + 1]) * 0.5 + (p0.f - p1.f) * (h / 8.0);
            let uc = 0.5 * (us[k] + us[k + 1]);
            let pc = eval(&self.params, &xc, uc, with_jac);
            let defect = xs[k + 1] - xs[k] - (p0.f + pc.f * 4.0 + p1.f) * (h / 6.0);
            eq.fixed_rows_mut::<4>(4 * k).copy_from(&defect);

            let mid = Mid {
                x: xc,
                dx_dxk: eye * 0.5 + p0.a * (h / 8.0),
                dx_dxk1: eye * 0.5 - p1.a * (h / 8.0),
                dx_duk: p0.b * (h / 8.0),
                dx_duk1: -p1.b * (h / 8.0),
                dx_dh: (p0.f - p1.f) / 8.0,
            };
            if with_jac {
                let r = 4 * k;
                let c = h / 6.0;
                let ac4 = pc.a * 4.0;
                let d_xk = -eye - (p0.a + ac4 * mid.dx_dxk) * c;
                let d_xk1 = eye - (p1.a + ac4 * mid.dx_dxk1) * c;
                let d_uk = -(p0.b + ac4 * mid.dx_duk + pc.b * 2.0) * c;
                let d_uk1 = -(p1.b + ac4 * mid.dx_duk1 + pc.b * 2.0) * c;
                let d_h = -(p0.f + pc.f * 4.0 + p1.f) / 6.0 - ac4 * mid.dx_dh * c;
                je.fixed_view_mut::<4, 4>(r, self.xi(k)).copy_from(&d_xk);
                je.fixed_view_mut::<4, 4>(r, self.xi(k + 1)).copy_from(&d_xk1);
                je.fixed_view_mut::<4, 1>(r, self.ui(k)).copy_from(&d_uk);
                je.fixed_view_mut::<4, 1>(r, self.ui(k + 1)).copy_from(&d_uk1);
                je.fixed_view_mut::<4, 1>(r, 0).copy_from(&(d_h * dh_dt));
            }
            mids.push(mid);
        }

        let r0 = 4 * (n - 1);
        let x0 = self.spec.x0.to_vector();
        let xf = self.spec.xf.to_vector();
        eq.fixed_rows_mut::<4>(r0).copy_from(&(xs[0] - x0));
        eq.fixed_rows_mut::<4>(r0 + 4).copy_from(&(xs[n - 1] - xf));
        if with_jac {
            je.fixed_view_mut::<4, 4>(r0, self.xi(0)).copy_from(&eye);
            je.fixed_view_mut::<4, 4>(r0 + 4, self.xi(n - 1)).copy_from(&eye);
        }

        let r_bar = self.spec.world.r_bar;
        for (i, &(pos, bar)) in self.clearance.iter().enumerate() {
            let k = pos.floor() as usize;
            let at_knot = pos.fract() == 0.0;
            let x = if at_knot { xs[k] } else { mids[k].x };
            let p = forward_kinematics(&self.params, x[0], x[1]).end_effector;
            let d = p - bar;
            ineq[i] = r_bar * r_bar - d.norm_squared();
            if with_jac {
                let jq = end_effector_jacobian(&self.params, x[0], x[1]);
                let gq = -(d.transpose() * jq) * 2.0;
                let gx = RowVector4::new(gq[0], gq[1], 0.0, 0.0);
                if at_knot {
                    ji.fixed_view_mut::<1, 4>(i, self.xi(k)).copy_from(&gx);
                } else {
                    let m = &mids[k];
                    ji.fixed_view_mut::<1, 4>(i, self.xi(k)).add_assign(&(gx * m.dx_dxk));
                    ji.fixed_view_mut::<1, 4>(i, self.xi(k + 1)).add_assign(&(gx * m.dx_dxk1));
                    ji[(i, self.ui(k))] += (gx * m.dx_duk)[0];
                    ji[(i, self.ui(k + 1))] += (gx * m.dx_duk1)[0];
                    ji[(i, 0)] += (gx * m.dx_dh)[0] * dh_dt;
                }
            }
        }

        let values = Values { objective, eq, ineq };
        (values, with_jac.then_some((grad, je, ji)))
    }
}

impl Nlp for Collocation {
    fn num_vars(&self) -> usize {
        1 + 5 * self.n
    }

    fn lower_bounds(&self) -> DVector<f64> {
        let mut lb = -self.upper_bounds();
        lb[0] = self.spec.config.t_bounds.0;
        lb
    }

    fn upper_bounds(&self) -> DVector<f64> {
        let cfg = &self.spec.config;
        let mut ub = DVector::zeros(self.num_vars());
        ub[0] = cfg.t_bounds.1;
        for k in 0..self.n {
            for j in 0..4 {
                ub[self.xi(k) + j] = cfg.x_lim[j];
            }
            ub[self.ui(k)] = cfg.u_lim;
        }
        ub
    }

    fn values(&self, z: &DVector<f64>) -> Values {
        self.evaluate(z, false).0
    }

    fn derivatives(&self, z: &DVector<f64>) -> Derivatives {
        let (values, d) = self.evaluate(z, true);
        let (gradient, eq_jacobian, ineq_jacobian) = d.expect("jacobians requested");
        Derivatives { values, gradient, eq_jacobian, ineq_jacobian }
    }
}
