//! Simulation, trajectory optimization and control for a two-link
//! underactuated brachiation robot with a single elbow motor and passive
//! hook grippers.

pub mod distill;
pub mod dynamics;
pub mod error;
pub mod maneuvers;
pub mod par;
pub mod pd;
pub mod rl_env;
pub mod sim;
pub mod statemachine;
pub mod trajectory;
pub mod tvlqr;
pub mod trajopt;

pub use dynamics::{ModelParams, State};
pub use error::{Error, Result};
pub use trajectory::Trajectory;
