//! Scenario harness: TOML scenario documents, deployment of the controller
//! and participants on either backend, run artifacts and cross-run
//! comparison.

mod artifacts;
mod compare;
mod config;
mod deploy;
mod run;
mod tcp;

pub use artifacts::{
    declared_artifacts, node_file, write_artifacts, write_atomic, ATTACK_FILE, CAPTURE_FILE, CONFIG_FILE,
    FRAMES_FILE, INCOMPLETE_MARKER, LINKS_FILE, REPORT_FILE, SUMMARY_FILE,
};
pub use compare::{
    aggregate, compare_reports, compare_runs, load_report, write_comparison, Comparison, ComparisonRow,
    CurvePoint, Direction, ReportAggregate, COMPARISON_FILE, CURVE_FILE, THREAT_FILE,
};
pub use config::{
    DatasetSpec, MtdSection, RoleAssignment, ScenarioConfig, ScenarioSection, SecuritySection, TrainSection,
};
pub use deploy::{sim_attacker_address, sim_controller_address, sim_node_address, Deployment, Timing};
pub use run::{map_truth, run_sim, sharing_set, NodeSummary, RunOutput, RunStatus, RunSummary};
pub use tcp::{free_port, run_tcp, run_tcp_node, NodeHandle, NodeLaunch, NodeLauncher, NodeResult, ThreadLauncher};

use std::fmt::Display;
use std::path::Path;

use thiserror::Error;

use crate::fabric::Backend;

#[derive(Debug, Error)]
pub enum ScenarioError {
    /// Malformed TOML; the message carries line and column.
    #[error("{0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("report schema mismatch: {0}")]
    Schema(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl ScenarioError {
    pub fn invalid(field: impl Into<String>, message: impl Display) -> Self {
        ScenarioError::Invalid {
            field: field.into(),
            message: message.to_string(),
        }
    }

    pub fn runtime(e: impl Display) -> Self {
        ScenarioError::Runtime(e.to_string())
    }

    /// True for problems with the inputs rather than the run.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            ScenarioError::Parse(_) | ScenarioError::Invalid { .. } | ScenarioError::Schema(_)
        )
    }
}

/// Runs `cfg` on `backend`; TCP runs start participants with `launcher`.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    base: Option<&Path>,
    backend: Backend,
    launcher: &dyn NodeLauncher,
) -> Result<RunOutput, ScenarioError> {
    match backend {
        Backend::Sim => run_sim(cfg, base),
        Backend::Tcp => run_tcp(cfg, base, launcher),
    }
}
