//! Experiment plumbing: scenario configs, the Monte Carlo engine, built-in
//! scenarios and report files.

pub mod config;
pub mod montecarlo;
pub mod report;
pub mod scenarios;

pub use config::{Correctives, FitChoice, ScenarioConfig, Tolerances};
pub use montecarlo::{monte_carlo, monte_carlo_in, run_monte_carlo, thread_pool, MCReport, McTerm};
pub use report::{OutputFormat, Report, ReportBundle};
pub use scenarios::{run_builtin, run_scenario, BUILTIN_SCENARIOS};
