//! Dense convex QP by a Mehrotra predictor–corrector interior-point method.
//!
//! ```text
//! minimize    ½ xᵀ H x + cᵀ x
//! subject to  A x  = b
//!             G x <= h
//!             lower <= x <= upper      (infinite entries are ignored)
//! ```
//!
//! `H` must be positive semidefinite. Problems here have at most a few
//! hundred variables, so the reduced KKT system is factored densely.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    /// The KKT system could not be factored or the iterates blew up.
    Failed,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of `A x = b`.
    pub y: DVector<f64>,
    /// Multipliers of `G x <= h` (non-negative).
    pub z: DVector<f64>,
    /// Multipliers of the lower/upper bounds, one per variable (zero when
    /// the bound is infinite).
    pub z_lower: DVector<f64>,
    pub z_upper: DVector<f64>,
    pub iterations: usize,
    pub status: QpStatus,
}

pub struct QpProblem<'a> {
    pub h: &'a DMatrix<f64>,
    pub c: &'a DVector<f64>,
    pub a: &'a DMatrix<f64>,
    pub b: &'a DVector<f64>,
    pub g: &'a DMatrix<f64>,
    pub hv: &'a DVector<f64>,
    pub lower: &'a DVector<f64>,
    pub upper: &'a DVector<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct QpOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_iterations: 80 }
    }
}

/// One inequality row in the unified `aᵀx <= rhs` form.
#[derive(Clone, Copy)]
enum Row {
    General(usize),
    Lower(usize),
    Upper(usize),
}

struct Rows {
    rows: Vec<Row>,
}

impl Rows {
    fn eval(&self, p: &QpProblem, x: &DVector<f64>) -> DVector<f64> {
        let gx = p.g * x;
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|r| match *r {
                Row::General(i) => gx[i] - p.hv[i],
                Row::Lower(i) => p.lower[i] - x[i],
                Row::Upper(i) => x[i] - p.upper[i],
            }),
        )
    }

    /// `Σ a_j w_j` for the unified rows.
    fn transpose_mul(&self, p: &QpProblem, w: &DVector<f64>) -> DVector<f64> {
        let n = p.c.len();
        let mut out = DVector::zeros(n);
        let mut wg = DVector::zeros(p.g.nrows());
        for (j, r) in self.rows.iter().enumerate() {
            match *r {
                Row::General(i) => wg[i] = w[j],
                Row::Lower(i) => out[i] -= w[j],
                Row::Upper(i) => out[i] += w[j],
            }
        }
        if p.g.nrows() > 0 {
            out += p.g.tr_mul(&wg);
        }
        out
    }

    fn mul(&self, p: &QpProblem, dx: &DVector<f64>) -> DVector<f64> {
        let gdx = p.g * dx;
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|r| match *r {
                Row::General(i) => gdx[i],
                Row::Lower(i) => -dx[i],
                Row::Upper(i) => dx[i],
            }),
        )
    }

    /// Adds `Σ a_j d_j a_jᵀ` to `k`. `g_cols` lists the columns of `G`
    /// that hold any nonzero.
    fn add_weighted_gram(&self, p: &QpProblem, g_cols: &[usize], d: &DVector<f64>, k: &mut DMatrix<f64>) {
        let mut dg = DVector::zeros(p.g.nrows());
        for (j, r) in self.rows.iter().enumerate() {
            match *r {
                Row::General(i) => dg[i] = d[j],
                Row::Lower(i) | Row::Upper(i) => k[(i, i)] += d[j],
            }
        }
        if p.g.nrows() > 0 && !g_cols.is_empty() {
            let sub = p.g.select_columns(g_cols);
            let mut scaled = sub.clone();
            for (i, mut row) in scaled.row_iter_mut().enumerate() {
                row *= dg[i];
            }
            let gram = sub.transpose() * scaled;
            for (a, &ca) in g_cols.iter().enumerate() {
                for (b, &cb) in g_cols.iter().enumerate() {
                    k[(ca, cb)] += gram[(a, b)];
                }
            }
        }
    }
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(1.0, f64::min)
}

pub fn solve_qp(p: &QpProblem, opts: &QpOptions) -> QpSolution {
    solve_qp_structured(p, opts, p.c.len())
}

type Lu = nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>;

/// Sparsity of a problem whose trailing variables can be eliminated: their
/// Hessian block is diagonal and uncoupled, and each general inequality row
/// touches at most one of them.
struct Split {
    /// First eliminated variable.
    m: usize,
    /// Nonzeros of each `G` row among the kept variables.
    g_core: Vec<Vec<(usize, f64)>>,
    /// The eliminated variable of each `G` row, with its coefficient.
    g_tail: Vec<Option<(usize, f64)>>,
    /// Nonzeros of each eliminated column of `A`, by row.
    a_tail: Vec<Vec<(usize, f64)>>,
}

impl Split {
    fn detect(p: &QpProblem, m: usize) -> Option<Self> {
        let n = p.c.len();
        if m >= n {
            return None;
        }
        for i in 0..n {
            for j in m..n {
                if i != j && (p.h[(i, j)] != 0.0 || p.h[(j, i)] != 0.0) {
                    return None;
                }
            }
        }
        let mut g_core = Vec::with_capacity(p.g.nrows());
        let mut g_tail = Vec::with_capacity(p.g.nrows());
        for row in p.g.row_iter() {
            g_core.push((0..m).filter(|&j| row[j] != 0.0).map(|j| (j, row[j])).collect());
            let mut tail = (m..n).filter(|&j| row[j] != 0.0);
            let first = tail.next().map(|j| (j - m, row[j]));
            if tail.next().is_some() {
                return None;
            }
            g_tail.push(first);
        }
        let a_tail = (m..n)
            .map(|j| (0..p.a.nrows()).filter(|&i| p.a[(i, j)] != 0.0).map(|i| (i, p.a[(i, j)])).collect())
            .collect();
        Some(Self { m, g_core, g_tail, a_tail })
    }
}

/// Factored reduced KKT matrix `[[H + Σ a d aᵀ, Aᵀ], [A, -εI]]`.
enum Factor {
    Full(Lu),
    /// Eliminated variables removed by a Schur complement; `coupling[j]`
    /// is the sparse column linking eliminated variable `j` to the rest.
    Reduced { m: usize, lu: Lu, coupling: Vec<Vec<(usize, f64)>>, tail_inv: DVector<f64> },
}

const PRIMAL_REG: f64 = 1e-12;
const DUAL_REG: f64 = 1e-12;

impl Factor {
    fn full(p: &QpProblem, rows: &Rows, g_cols: &[usize], d: &DVector<f64>) -> Self {
        let n = p.c.len();
        let me = p.a.nrows();
        let mut k = DMatrix::zeros(n + me, n + me);
        k.view_mut((0, 0), (n, n)).copy_from(p.h);
        let mut kh = k.view_mut((0, 0), (n, n)).into_owned();
        rows.add_weighted_gram(p, g_cols, d, &mut kh);
        for i in 0..n {
            kh[(i, i)] += PRIMAL_REG;
        }
        k.view_mut((0, 0), (n, n)).copy_from(&kh);
        k.view_mut((n, 0), (me, n)).copy_from(p.a);
        k.view_mut((0, n), (n, me)).copy_from(&p.a.transpose());
        for i in 0..me {
            k[(n + i, n + i)] = -DUAL_REG;
        }
        Factor::Full(k.lu())
    }

    fn reduced(p: &QpProblem, rows: &Rows, split: &Split, d: &DVector<f64>) -> Self {
        let n = p.c.len();
        let me = p.a.nrows();
        let m = split.m;
        let nt = n - m;
        let mut k = DMatrix::zeros(m + me, m + me);
        k.view_mut((0, 0), (m, m)).copy_from(&p.h.view((0, 0), (m, m)));
        k.view_mut((m, 0), (me, m)).copy_from(&p.a.columns(0, m));
        k.view_mut((0, m), (m, me)).copy_from(&p.a.columns(0, m).transpose());
        for i in 0..m {
            k[(i, i)] += PRIMAL_REG;
        }
        for i in 0..me {
            k[(m + i, m + i)] = -DUAL_REG;
        }
        let mut tail = DVector::from_fn(nt, |j, _| p.h[(m + j, m + j)] + PRIMAL_REG);
        let mut coupling: Vec<Vec<(usize, f64)>> =
            split.a_tail.iter().map(|col| col.iter().map(|&(i, v)| (m + i, v)).collect()).collect();
        for (j, r) in rows.rows.iter().enumerate() {
            match *r {
                Row::General(i) => {
                    let w = d[j];
                    let core = &split.g_core[i];
                    for &(a, va) in core {
                        for &(b, vb) in core {
                            k[(a, b)] += w * va * vb;
                        }
                    }
                    if let Some((t, vt)) = split.g_tail[i] {
                        tail[t] += w * vt * vt;
                        coupling[t].extend(core.iter().map(|&(a, va)| (a, w * va * vt)));
                    }
                }
                Row::Lower(i) | Row::Upper(i) if i < m => k[(i, i)] += d[j],
                Row::Lower(i) | Row::Upper(i) => tail[i - m] += d[j],
            }
        }
        let tail_inv = tail.map(|v| 1.0 / v);
        for (col, &ti) in coupling.iter().zip(tail_inv.iter()) {
            for &(a, va) in col {
                for &(b, vb) in col {
                    k[(a, b)] -= va * ti * vb;
                }
            }
        }
        Factor::Reduced { m, lu: k.lu(), coupling, tail_inv }
    }

    fn solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        match self {
            Factor::Full(lu) => lu.solve(rhs),
            Factor::Reduced { m, lu, coupling, tail_inv } => {
                // rhs is [x_kept, x_eliminated, y]; the reduced system is [x_kept, y]
                let (m, nt) = (*m, tail_inv.len());
                let nk = rhs.len() - nt;
                let mut r = DVector::zeros(nk);
                r.rows_mut(0, m).copy_from(&rhs.rows(0, m));
                r.rows_mut(m, nk - m).copy_from(&rhs.rows(m + nt, nk - m));
                let r_tail = rhs.rows(m, nt).component_mul(tail_inv);
                for (col, rt) in coupling.iter().zip(r_tail.iter()) {
                    for &(a, va) in col {
                        r[a] -= va * rt;
                    }
                }
                let kept = lu.solve(&r)?;
                let mut out = DVector::zeros(rhs.len());
                out.rows_mut(0, m).copy_from(&kept.rows(0, m));
                out.rows_mut(m + nt, nk - m).copy_from(&kept.rows(m, nk - m));
                for (j, col) in coupling.iter().enumerate() {
                    let cx: f64 = col.iter().map(|&(a, va)| va * kept[a]).sum();
                    out[m + j] = (rhs[m + j] - cx) * tail_inv[j];
                }
                Some(out)
            }
        }
    }
}

/// As [`solve_qp`], for problems whose variables from `diag_from` on have a
/// diagonal Hessian and appear in at most one general inequality row each.
/// Those variables are eliminated from the KKT system before factoring.
pub fn solve_qp_structured(p: &QpProblem, opts: &QpOptions, diag_from: usize) -> QpSolution {
    let n = p.c.len();
    let me = p.a.nrows();
    let mut rows = Vec::new();
    rows.extend((0..p.g.nrows()).map(Row::General));
    rows.extend((0..n).filter(|&i| p.lower[i].is_finite()).map(Row::Lower));
    rows.extend((0..n).filter(|&i| p.upper[i].is_finite()).map(Row::Upper));
    let rows = Rows { rows };
    let mi = rows.rows.len();
    let g_cols: Vec<usize> = (0..n).filter(|&j| p.g.column(j).iter().any(|v| *v != 0.0)).collect();
    let split = Split::detect(p, diag_from);

    // start at the box midpoint (or zero), slacks and duals at one
    let mut x = DVector::from_fn(n, |i, _| {
        let (l, u) = (p.lower[i], p.upper[i]);
        match (l.is_finite(), u.is_finite()) {
            (true, true) => 0.5 * (l + u),
            (true, false) => l.max(0.0),
            (false, true) => u.min(0.0),
            _ => 0.0,
        }
    });
    let mut y = DVector::zeros(me);
    let ax0 = rows.eval(p, &x);
    let mut s = DVector::from_fn(mi, |j, _| (-ax0[j]).max(1.0));
    let mut z = DVector::from_element(mi, 1.0);

    let scale_d = 1.0 + p.c.amax();
    let scale_e = 1.0 + p.b.amax();
    let scale_i = 1.0 + p.hv.amax();
    let mut status = QpStatus::MaxIterations;
    let mut iterations = 0;

    let assemble = |x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>, s: &DVector<f64>| {
        let r_d = p.h * x + p.c + p.a.tr_mul(y) + rows.transpose_mul(p, z);
        let r_e = p.a * x - p.b;
        let r_i = rows.eval(p, x) + s;
        (r_d, r_e, r_i)
    };

    for it in 0..opts.max_iterations {
        iterations = it;
        let (r_d, r_e, r_i) = assemble(&x, &y, &z, &s);
        let mu = if mi > 0 { s.dot(&z) / mi as f64 } else { 0.0 };
        if r_d.amax() <= opts.tolerance * scale_d
            && (me == 0 || r_e.amax() <= opts.tolerance * scale_e)
            && (mi == 0 || r_i.amax() <= opts.tolerance * scale_i)
            && mu <= opts.tolerance
        {
            status = QpStatus::Optimal;
            break;
        }
        if !(r_d.iter().chain(r_e.iter()).chain(r_i.iter()).all(|v| v.is_finite())) || x.amax() > 1e12 {
            status = QpStatus::Failed;
            break;
        }

        let d = z.component_div(&s);
        let lu = match &split {
            Some(split) => Factor::reduced(p, &rows, split, &d),
            None => Factor::full(p, &rows, &g_cols, &d),
        };

        let solve_dir = |r_c: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            // w_j = (-r_c + z r_i) / s
            let w = DVector::from_fn(mi, |j, _| (-r_c[j] + z[j] * r_i[j]) / s[j]);
            let top = -&r_d - rows.transpose_mul(p, &w);
            let mut rhs = DVector::zeros(n + me);
            rhs.rows_mut(0, n).copy_from(&top);
            rhs.rows_mut(n, me).copy_from(&(-&r_e));
            let sol = lu.solve(&rhs)?;
            let dx = sol.rows(0, n).into_owned();
            let dy = sol.rows(n, me).into_owned();
            let adx = rows.mul(p, &dx);
            let ds = -&r_i - &adx;
            let dz = DVector::from_fn(mi, |j, _| (-r_c[j] - z[j] * ds[j]) / s[j]);
            if dx.iter().chain(dz.iter()).all(|v| v.is_finite()) {
                Some((dx, dy, dz, ds))
            } else {
                None
            }
        };

        let rc_aff = s.component_mul(&z);
        let Some((_, _, dz_a, ds_a)) = solve_dir(&rc_aff) else {
            status = QpStatus::Failed;
            break;
        };
        let a_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
        let mu_aff = if mi > 0 {
            (&s + &ds_a * a_aff).dot(&(&z + &dz_a * a_aff)) / mi as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).clamp(0.0, 1.0) } else { 0.0 };
        let rc = DVector::from_fn(mi, |j, _| s[j] * z[j] + ds_a[j] * dz_a[j] - sigma * mu);
        let Some((dx, dy, dz, ds)) = solve_dir(&rc) else {
            status = QpStatus::Failed;
            break;
        };
        let alpha = (0.995 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
        x += &dx * alpha;
        y += &dy * alpha;
        z += &dz * alpha;
        s += &ds * alpha;
        iterations = it + 1;
    }

    let mut z_lower = DVector::zeros(n);
    let mut z_upper = DVector::zeros(n);
    let mut zg = DVector::zeros(p.g.nrows());
    for (j, r) in rows.rows.iter().enumerate() {
        match *r {
            Row::General(i) => zg[i] = z[j],
            Row::Lower(i) => z_lower[i] = z[j],
            Row::Upper(i) => z_upper[i] = z[j],
        }
    }
    QpSolution { x, y, z: zg, z_lower, z_upper, iterations, status }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn empty(n: usize) -> (DMatrix<f64>, DVector<f64>) {
        (DMatrix::zeros(0, n), DVector::zeros(0))
    }

    #[test]
    fn unconstrained_quadratic() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let c = DVector::from_vec(vec![-1.0, 1.0]);
        let (a, b) = empty(2);
        let (g, hv) = empty(2);
        let inf = DVector::from_element(2, f64::INFINITY);
        let p = QpProblem { h: &h, c: &c, a: &a, b: &b, g: &g, hv: &hv, lower: &(-&inf), upper: &inf };
        let sol = solve_qp(&p, &QpOptions::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        let exact = h.clone().lu().solve(&(-&c)).unwrap();
        assert_abs_diff_eq!(sol.x, exact, epsilon = 1e-8);
    }

    #[test]
    fn equality_and_bounds_active() {
        // min x² + y² s.t. x + y = 1, x <= 0.2  -> x = 0.2, y = 0.8
        let h = DMatrix::identity(2, 2) * 2.0;
        let c = DVector::zeros(2);
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0]);
        let (g, hv) = empty(2);
        let lower = DVector::from_element(2, f64::NEG_INFINITY);
        let upper = DVector::from_vec(vec![0.2, f64::INFINITY]);
        let p = QpProblem { h: &h, c: &c, a: &a, b: &b, g: &g, hv: &hv, lower: &lower, upper: &upper };
        let sol = solve_qp(&p, &QpOptions::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 0.2, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.x[1], 0.8, epsilon = 1e-8);
        // stationarity: 2x + y_eq + z_u = 0 on the first coordinate
        assert_abs_diff_eq!(2.0 * 0.2 + sol.y[0] + sol.z_upper[0], 0.0, epsilon = 1e-7);
        assert!(sol.z_upper[0] > 0.0);
    }

    #[test]
    fn general_inequality_lp_like() {
        // min -x - y + small reg s.t. x + 2y <= 4, 3x + y <= 6, x, y >= 0
        let h = DMatrix::identity(2, 2) * 1e-6;
        let c = DVector::from_vec(vec![-1.0, -1.0]);
        let (a, b) = empty(2);
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 1.0]);
        let hv = DVector::from_vec(vec![4.0, 6.0]);
        let lower = DVector::zeros(2);
        let upper = DVector::from_element(2, f64::INFINITY);
        let p = QpProblem { h: &h, c: &c, a: &a, b: &b, g: &g, hv: &hv, lower: &lower, upper: &upper };
        let sol = solve_qp(&p, &QpOptions::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.6, epsilon = 1e-4);
        assert_abs_diff_eq!(sol.x[1], 1.2, epsilon = 1e-4);
    }

    #[test]
    fn inconsistent_constraints_do_not_report_optimal() {
        let h = DMatrix::identity(1, 1);
        let c = DVector::zeros(1);
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let b = DVector::from_vec(vec![5.0]);
        let (g, hv) = empty(1);
        let lower = DVector::from_element(1, -1.0);
        let upper = DVector::from_element(1, 1.0);
        let p = QpProblem { h: &h, c: &c, a: &a, b: &b, g: &g, hv: &hv, lower: &lower, upper: &upper };
        let sol = solve_qp(&p, &QpOptions::default());
        assert_ne!(sol.status, QpStatus::Optimal);
    }

    #[test]
    fn eliminating_elastic_variables_gives_the_same_solution() {
        // min ½|x|² + cᵀx + Σ v + w + t  with  Ax = b + v - w,  Gx <= h + t
        let (n, me, mi) = (5, 2, 3);
        let ne = n + 2 * me + mi;
        let mut h = DMatrix::zeros(ne, ne);
        for i in 0..ne {
            h[(i, i)] = if i < n { 1.0 + 0.1 * i as f64 } else { 1e-9 };
        }
        h[(0, 1)] = 0.3;
        h[(1, 0)] = 0.3;
        let mut c = DVector::from_element(ne, 1.0);
        c.rows_mut(0, n).copy_from(&DVector::from_vec(vec![0.5, -1.0, 0.2, 0.0, 1.5]));
        let mut a = DMatrix::zeros(me, ne);
        a.view_mut((0, 0), (me, n)).copy_from(&DMatrix::from_row_slice(me, n, &[1.0, 2.0, 0.0, -1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 3.0]));
        let mut g = DMatrix::zeros(mi, ne);
        g.view_mut((0, 0), (mi, n)).copy_from(&DMatrix::from_row_slice(mi, n, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 2.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.5]));
        for i in 0..me {
            a[(i, n + i)] = -1.0;
            a[(i, n + me + i)] = 1.0;
        }
        for i in 0..mi {
            g[(i, n + 2 * me + i)] = -1.0;
        }
        let b = DVector::from_vec(vec![4.0, -9.0]);
        let hv = DVector::from_vec(vec![-1.0, 0.5, 0.2]);
        let mut lower = DVector::zeros(ne);
        let mut upper = DVector::from_element(ne, f64::INFINITY);
        for i in 0..n {
            lower[i] = -2.0;
            upper[i] = 2.0;
        }
        let p = QpProblem { h: &h, c: &c, a: &a, b: &b, g: &g, hv: &hv, lower: &lower, upper: &upper };
        let full = solve_qp(&p, &QpOptions::default());
        let reduced = solve_qp_structured(&p, &QpOptions::default(), n);
        assert_eq!(full.status, QpStatus::Optimal);
        assert_eq!(reduced.status, QpStatus::Optimal);
        assert_abs_diff_eq!(full.x, reduced.x, epsilon = 1e-7);
        assert_abs_diff_eq!(full.y, reduced.y, epsilon = 1e-6);
        // the equalities cannot both hold inside the box, so some slack is used
        assert!(full.x.rows(n, 2 * me).sum() > 1e-3);
    }
}
