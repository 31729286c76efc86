use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::trajectory::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed CSV: {0}")]
    Csv(String),

    #[error("mass matrix is singular")]
    SingularMassMatrix,

    #[error("invalid behavior spec: {0}")]
    InvalidSpec(String),

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("solver hit the iteration limit ({iterations}) with constraint violation {violation:.3e}")]
    MaxIterations {
        iterations: usize,
        violation: f64,
        best: Box<Trajectory>,
    },

    #[error("solver could not restore feasibility (violation {violation:.3e})")]
    Infeasible { violation: f64, best: Box<Trajectory> },

    #[error("Riccati integration diverged at t = {time:.4} s")]
    RiccatiBlowup { time: f64 },

    #[error("invalid controller config: {0}")]
    InvalidController(String),

    #[error("release did not complete within {0} s")]
    ReleaseTimeout(f64),

    #[error("step called on a terminated episode")]
    StepAfterTermination,

    #[error("recording has identically zero input torque")]
    DegenerateRecording,

    #[error("state diverged at t = {time:.4} s")]
    NumericalDivergence { time: f64 },

    #[error("illegal transition at step {index}: {from} -> {to}")]
    IllegalTransition { index: usize, from: String, to: String },

    #[error("support switch requires double support")]
    SingleSupport,

    #[error("plan aborted at step {step}: {reason}")]
    PlanAborted { step: usize, reason: String },

    #[error("policy artifact: {0}")]
    Policy(String),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }
}
