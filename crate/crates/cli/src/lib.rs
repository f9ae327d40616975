//! Experiment runner for the CPGD laboratory.
//!
//! [`config`] resolves strict TOML configs with per-key provenance, [`scenario`] holds
//! the named presets and writes their CSV/JSON artifacts, and [`verify`] is the oracle
//! suite behind the `verify` command.

pub mod config;
pub mod scenario;
pub mod verify;

pub use config::{parse_config, ConfigBuilder, ConfigError, ExperimentConfig, Source};
pub use scenario::{find, run_scenario, Outcome, Scenario, ScenarioError, SCENARIOS};
