//! Level sampling and in-context environment design on a gridworld CMDP.

pub mod agent;
pub mod buffer;
pub mod designers;
pub mod driver;
pub mod env;
pub mod error;
pub mod levelgen;
pub mod metrics;
pub mod nn;
pub mod probe;
pub mod rng;
pub mod vae;

pub use error::{Error, Result};
