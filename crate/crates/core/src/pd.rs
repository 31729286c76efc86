//! Model-free PD tracking of the elbow joint along a nominal trajectory.
//!
//! `τ = u*(t) - Kp (q2 - q2*(t)) - Kd (q̇2 - q̇2*(t))`, clamped to the motor
//! limit. The error terms enter with a negative sign: with the elbow torque
//! acting positively on `q2`, that is the stabilizing choice (positive error
//! feedback drives the elbow away from the nominal; see the regression test
//! `printed_positive_feedback_diverges`).

use serde::{Deserialize, Serialize};

use crate::dynamics::{State, MOTOR_TORQUE_LIMIT};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
    /// Control frequency (Hz).
    pub rate: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self { kp: 100.0, kd: 2.0, rate: 300.0 }
    }
}

impl PdGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.kp >= 0.0 && self.kd >= 0.0 && self.rate > 0.0) {
            return Err(Error::InvalidController("PD gains must be non-negative and the rate positive".into()));
        }
        Ok(())
    }
}

/// PD torque at time `t` of the nominal; the nominal is looked up by time.
pub fn pd_control(gains: &PdGains, nominal: &Trajectory, x: &State, t: f64) -> f64 {
    let reference = nominal.state_at(t);
    let e = x.q2 - reference.q2;
    let ed = x.qd2 - reference.qd2;
    let u = nominal.input_at(t) - gains.kp * e - gains.kd * ed;
    u.clamp(-MOTOR_TORQUE_LIMIT, MOTOR_TORQUE_LIMIT)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{rk4_step, ModelParams};

    fn nominal(p: &ModelParams) -> Trajectory {
        Trajectory::uniform(
            p,
            1.0,
            &[State::new(-0.6, -1.8, -0.6, 1.4), State::new(0.1, 0.4, 1.0, -1.0), State::new(0.7, 1.9, -3.0, -2.5)],
            &[0.5, -0.2, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn on_the_nominal_the_output_is_feedforward() {
        let p = ModelParams::default();
        let nom = nominal(&p);
        for t in [0.0, 0.13, 0.5, 0.77, 1.0] {
            assert_eq!(pd_control(&PdGains::default(), &nom, &nom.state_at(t), t), nom.input_at(t));
        }
    }

    #[test]
    fn position_error_of_a_tenth_radian_gives_ten_newton_meters() {
        let p = ModelParams::default();
        let nom = Trajectory::uniform(&p, 1.0, &[State::default(); 2], &[0.0; 2]).unwrap();
        let gains = PdGains { kp: 100.0, kd: 2.0, rate: 300.0 };
        let x = State::new(0.0, 0.1, 0.0, 0.0);
        // 10 N·m before the clamp, so the clamp is what comes out
        assert_eq!(pd_control(&gains, &nom, &x, 0.5), -MOTOR_TORQUE_LIMIT);
        let unclamped = PdGains { kp: 100.0, kd: 0.0, rate: 300.0 };
        let small = State::new(0.0, 0.01, 0.0, 0.0);
        assert!((pd_control(&unclamped, &nom, &small, 0.5) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gains_replay_the_feedforward() {
        let p = ModelParams::default();
        let nom = nominal(&p);
        let zero = PdGains { kp: 0.0, kd: 0.0, rate: 300.0 };
        let off = State::new(0.3, -0.2, 1.0, 2.0);
        assert_eq!(pd_control(&zero, &nom, &off, 0.4), nom.input_at(0.4));
    }

    /// Holds the hanging pose against an elbow offset; returns the final
    /// elbow error with the given sign on the error terms.
    fn settle(sign: f64) -> f64 {
        let p = ModelParams::default();
        let nom = Trajectory::uniform(&p, 2.0, &[State::default(); 2], &[0.0; 2]).unwrap();
        let g = PdGains::default();
        let mut x = State::new(0.0, 0.2, 0.0, 0.0);
        let dt = 1e-4;
        for i in 0..10_000 {
            let t = i as f64 * dt;
            let ff = nom.input_at(t);
            let u = if sign < 0.0 { pd_control(&g, &nom, &x, t) } else { 2.0 * ff - pd_control(&g, &nom, &x, t) };
            x = State::from_vector(&rk4_step(&p, &x.to_vector(), u, dt).unwrap());
        }
        x.q2.abs()
    }

    #[test]
    fn printed_positive_feedback_diverges() {
        assert!(settle(-1.0) < 1e-3);
        assert!(settle(1.0) > 1.0);
    }
}
