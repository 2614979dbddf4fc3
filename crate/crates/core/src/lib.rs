//! Laboratory for studying backdoor attacks on continuous-control agents and
//! the recovery-triggered-states defense: train DDPG victims, poison their
//! replay data, train single- and dual-objective dynamics-model defenders, and
//! measure detection and return recovery under scheduled attacks.

pub mod config;
pub mod diffnum;
pub mod agent;
pub mod backdoor;
pub mod defender;
pub mod harness;
pub mod pipeline;
pub mod envs;
pub mod error;
pub mod seeding;

pub use error::{Error, Result};

/// Tool version stamped into every report and checkpoint container.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
