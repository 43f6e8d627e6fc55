//! Base-parallel ramp-metering control on an ACTM freeway model.

pub mod actm;
pub mod base;
pub mod bench;
pub mod error;
pub mod mpc;
pub mod optim;
pub mod orchestrator;
pub mod scalar;
pub mod scenario;

pub use error::{ControlError, ModelError, OptimError, RunError, ScenarioError, TrainingError};
