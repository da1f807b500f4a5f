//! Configuration, data ingestion, persistence and run orchestration for
//! symmetric equilibrium learning experiments.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod run;
pub mod verify;

pub use config::{load_config, RunConfig};
pub use error::{HarnessError, Result};
