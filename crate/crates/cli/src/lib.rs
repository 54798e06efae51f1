//! Experiment harness for `clusterwm`: configuration, trial machinery, the
//! experiment recipes and their CSV / JSON result tables.

pub mod config;
pub mod error;
pub mod experiments;
pub mod harness;
pub mod table;

pub use config::ExperimentConfig;
pub use error::{HarnessError, HarnessResult};
pub use harness::World;
