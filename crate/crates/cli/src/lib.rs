//! Config-driven runner for the msreid pipeline: TOML configs with named
//! profiles, staged execution into a run directory, ablation sweeps, and
//! cross-run reporting.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::{Profile, RunConfig, SweepConfig};
pub use error::{CliError, CliResult};
pub use pipeline::{run_pipeline, run_sweep, StageSet, FAILED_MARKER};
pub use report::{collect_rows, emit_report, ReportRow, RunStatus, ScenarioCell};
