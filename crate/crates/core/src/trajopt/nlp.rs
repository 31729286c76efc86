//! Narrow interface between a transcription and the NLP solver.

use nalgebra::{DMatrix, DVector};

/// Function values at a point.
#[derive(Clone, Debug)]
pub struct Values {
    pub objective: f64,
    /// Equality residuals, feasible when zero.
    pub eq: DVector<f64>,
    /// Inequality residuals, feasible when `<= 0`.
    pub ineq: DVector<f64>,
}

/// Values plus first derivatives.
#[derive(Clone, Debug)]
pub struct Derivatives {
    pub values: Values,
    pub gradient: DVector<f64>,
    pub eq_jacobian: DMatrix<f64>,
    pub ineq_jacobian: DMatrix<f64>,
}

/// A smooth nonlinear program
/// `min f(z)  s.t.  c_eq(z) = 0,  c_in(z) <= 0,  lower <= z <= upper`.
pub trait Nlp {
    fn num_vars(&self) -> usize;
    fn lower_bounds(&self) -> DVector<f64>;
    fn upper_bounds(&self) -> DVector<f64>;
    fn values(&self, z: &DVector<f64>) -> Values;
    fn derivatives(&self, z: &DVector<f64>) -> Derivatives;
}

impl Values {
    /// ℓ1 norm of the constraint violation (bounds excluded).
    pub fn violation_l1(&self) -> f64 {
        self.eq.iter().map(|v| v.abs()).sum::<f64>() + self.ineq.iter().map(|v| v.max(0.0)).sum::<f64>()
    }

    pub fn violation_max(&self) -> f64 {
        let e = self.eq.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        self.ineq.iter().fold(e, |m, v| m.max(*v))
    }
}

/// Finite-difference check of a transcription's analytic derivatives.
/// Returns the largest absolute mismatch over gradient and Jacobians.
pub fn derivative_mismatch<P: Nlp + ?Sized>(nlp: &P, z: &DVector<f64>, step: f64) -> f64 {
    let d = nlp.derivatives(z);
    let mut worst = 0.0_f64;
    for j in 0..nlp.num_vars() {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[j] += step;
        zm[j] -= step;
        let (vp, vm) = (nlp.values(&zp), nlp.values(&zm));
        let g = (vp.objective - vm.objective) / (2.0 * step);
        worst = worst.max((g - d.gradient[j]).abs());
        for i in 0..vp.eq.len() {
            let fd = (vp.eq[i] - vm.eq[i]) / (2.0 * step);
            worst = worst.max((fd - d.eq_jacobian[(i, j)]).abs());
        }
        for i in 0..vp.ineq.len() {
            let fd = (vp.ineq[i] - vm.ineq[i]) / (2.0 * step);
            worst = worst.max((fd - d.ineq_jacobian[(i, j)]).abs());
        }
    }
    worst
}
