//! Multi-robot frontier exploration with fidelity-coupled assignment and a
//! learned planner/reactive gate.

pub mod assignment;
pub mod error;
pub mod execution;
pub mod gate;
pub mod gridworld;
pub mod harness;
pub mod metrics;

pub use error::{Error, Result};
