//! Tabular testbed for on-policy distillation.

pub mod cli;
pub mod config;
pub mod error;
pub mod objectives;
pub mod metrics;
pub mod oracle;
pub mod policy;
pub mod prob;
pub mod protocol;
pub mod rng;
pub mod tasks;
pub mod teacher;
pub mod telemetry;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
