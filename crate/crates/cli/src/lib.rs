//! Scenario configs, experiment modes, CSV outputs and benchmarks for
//! mean field games with erroneous initial information.

pub mod bench;
pub mod config;
pub mod modes;
pub mod output;

pub use config::{load_config, parse_config, ConfigError, FieldError, Overrides, ScenarioConfig};
pub use modes::{mode_registry, run_pipeline, run_scenario, RunError};
pub use output::RunManifest;
