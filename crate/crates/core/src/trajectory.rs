//! Time-indexed knot sequences with cubic-Hermite state interpolation and
//! first-order-hold inputs.

use std::io::{BufRead, Write};

use nalgebra::Vector4;

use crate::dynamics::{state_derivative, ModelParams, State};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Knot {
    pub t: f64,
    pub state: State,
    pub u: f64,
}

/// A nominal trajectory. Knot derivatives come from the dynamics, so the
/// cubic between two knots is the same one Hermite–Simpson collocation
/// enforces.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    knots: Vec<Knot>,
    derivs: Vec<Vector4<f64>>,
}

pub const CSV_HEADER: &str = "t,q1,q2,qd1,qd2,u";

impl Trajectory {
    pub fn new(params: &ModelParams, knots: Vec<Knot>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidTrajectory("need at least two knots".into()));
        }
        if knots[0].t != 0.0 {
            return Err(Error::InvalidTrajectory("first knot must be at t = 0".into()));
        }
        if knots.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::InvalidTrajectory("knot times must be strictly increasing".into()));
        }
        let derivs = knots
            .iter()
            .map(|k| state_derivative(params, &k.state.to_vector(), k.u))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { knots, derivs })
    }

    /// Knots evenly spaced over `[0, duration]`.
    pub fn uniform(params: &ModelParams, duration: f64, states: &[State], inputs: &[f64]) -> Result<Self> {
        if states.len() != inputs.len() {
            return Err(Error::InvalidTrajectory("state/input length mismatch".into()));
        }
        let n = states.len();
        let knots = states
            .iter()
            .zip(inputs)
            .enumerate()
            .map(|(k, (s, &u))| Knot { t: duration * k as f64 / (n - 1) as f64, state: *s, u })
            .collect();
        Self::new(params, knots)
    }

    pub fn knots(&self) -> &[Knot] {
        &self.knots
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.knots.last().map_or(0.0, |k| k.t)
    }

    pub fn initial_state(&self) -> State {
        self.knots[0].state
    }

    pub fn final_state(&self) -> State {
        self.knots[self.knots.len() - 1].state
    }

    fn segment(&self, t: f64) -> usize {
        let idx = self.knots.partition_point(|k| k.t <= t);
        idx.saturating_sub(1).min(self.knots.len() - 2)
    }

    /// Interpolated state; clamped to the end knots outside `[0, T]`.
    pub fn state_at(&self, t: f64) -> State {
        if t <= 0.0 {
            return self.knots[0].state;
        }
        if t >= self.duration() {
            return self.final_state();
        }
        let k = self.segment(t);
        let (a, b) = (&self.knots[k], &self.knots[k + 1]);
        let h = b.t - a.t;
        let s = (t - a.t) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let x = a.state.to_vector() * h00
            + self.derivs[k] * (h10 * h)
            + b.state.to_vector() * h01
            + self.derivs[k + 1] * (h11 * h);
        State::from_vector(&x)
    }

    /// First-order-hold input; clamped outside `[0, T]`.
    pub fn input_at(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return self.knots[0].u;
        }
        if t >= self.duration() {
            return self.knots[self.knots.len() - 1].u;
        }
        let k = self.segment(t);
        let (a, b) = (&self.knots[k], &self.knots[k + 1]);
        let s = (t - a.t) / (b.t - a.t);
        a.u + s * (b.u - a.u)
    }

    /// Dense samples `(t, state, u)` at a fixed step, including `T`.
    pub fn resample(&self, dt: f64) -> Vec<(f64, State, f64)> {
        let n = (self.duration() / dt).round() as usize;
        (0..=n)
            .map(|i| {
                let t = (i as f64 * dt).min(self.duration());
                (t, self.state_at(t), self.input_at(t))
            })
            .collect()
    }

    pub fn max_abs_input(&self) -> f64 {
        self.knots.iter().map(|k| k.u.abs()).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for k in &self.knots {
            let s = k.state;
            writeln!(
                w,
                "{},{},{},{},{},{}",
                fmt_sig9(k.t),
                fmt_sig9(s.q1),
                fmt_sig9(s.q2),
                fmt_sig9(s.qd1),
                fmt_sig9(s.qd2),
                fmt_sig9(k.u)
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn read_csv<R: BufRead>(params: &ModelParams, r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Csv("empty file".into()))?
            .map_err(|e| Error::Csv(e.to_string()))?;
        if header.trim() != CSV_HEADER {
            return Err(Error::Csv(format!("expected header `{CSV_HEADER}`, found `{}`", header.trim())));
        }
        let mut knots = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Csv(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let v = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Csv(format!("row {}: {e}", i + 2)))?;
            if v.len() != 6 {
                return Err(Error::Csv(format!("row {}: expected 6 fields, got {}", i + 2, v.len())));
            }
            knots.push(Knot { t: v[0], state: State::new(v[1], v[2], v[3], v[4]), u: v[5] });
        }
        Self::new(params, knots)
    }
}

/// Scientific notation with nine significant digits.
pub fn fmt_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sample() -> Trajectory {
        let p = ModelParams::default();
        let states = [State::new(0.0, 0.0, 0.0, 0.0), State::new(0.1, 0.2, 0.5, 1.0), State::new(0.3, 0.1, 0.2, -0.5)];
        Trajectory::uniform(&p, 1.0, &states, &[0.0, 1.0, -0.5]).unwrap()
    }

    #[test]
    fn interpolation_hits_knots_and_holds_inputs_linearly() {
        let tr = sample();
        for k in tr.knots() {
            assert_abs_diff_eq!(tr.state_at(k.t).to_vector(), k.state.to_vector(), epsilon = 1e-14);
            assert_abs_diff_eq!(tr.input_at(k.t), k.u, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(tr.input_at(0.25), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(tr.input_at(0.75), 0.25, epsilon = 1e-14);
        assert_eq!(tr.state_at(5.0), tr.final_state());
    }

    #[test]
    fn rejects_non_monotone_times() {
        let p = ModelParams::default();
        let k = |t| Knot { t, state: State::default(), u: 0.0 };
        assert!(Trajectory::new(&p, vec![k(0.0), k(0.5), k(0.5)]).is_err());
        assert!(Trajectory::new(&p, vec![k(0.1), k(0.5)]).is_err());
    }

    #[test]
    fn csv_header_and_precision() {
        let tr = sample();
        let s = tr.to_csv_string();
        assert!(s.starts_with("t,q1,q2,qd1,qd2,u\n"));
        assert_eq!(s.lines().count(), 4);
        let back = Trajectory::read_csv(&ModelParams::default(), s.as_bytes()).unwrap();
        for (a, b) in back.knots().iter().zip(tr.knots()) {
            assert_abs_diff_eq!(a.state.to_vector(), b.state.to_vector(), epsilon = 1e-8);
        }
        assert_eq!(fmt_sig9(1.0 / 3.0), "3.33333333e-1");
    }

    #[test]
    fn bad_header_is_reported() {
        let err = Trajectory::read_csv(&ModelParams::default(), "a,b\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("expected header"));
    }
}
