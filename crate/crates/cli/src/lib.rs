//! Configuration, scenario execution and CSV output for the `fedmismatch`
//! experiment runner.

pub mod config;
pub mod method;
pub mod output;
pub mod presets;
pub mod runner;

pub use config::{ConfigError, ExperimentConfig, ValidationReport};
pub use method::Method;
pub use runner::{run_experiment, run_to_dir, RunError, RunOptions};
