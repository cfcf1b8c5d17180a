//! Command-line front end for the `iowa_fl` simulator: scenario presets,
//! configuration layering, and metric files.

pub mod config;
pub mod experiment;
pub mod output;

pub use config::{parse_config, ConfigError, Format, Scenario, Settings};
pub use experiment::run;
pub use output::emit_metrics;
