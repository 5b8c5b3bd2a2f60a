//! Experiment orchestration for the damping-control laboratory: power-flow
//! reports, training runs, evaluation grids, hyperparameter sweeps and plot
//! data. Every command is a deterministic function of its config and seeds.

pub mod config;
pub mod error;
pub mod eval;
pub mod plot;
pub mod powerflow;
pub mod sweep;
pub mod train;

pub use config::{ControllerKind, ExperimentConfig};
pub use error::LabError;

use std::path::Path;

/// Creates `dir` and its parents.
pub(crate) fn ensure_dir(dir: &Path) -> Result<(), LabError> {
    std::fs::create_dir_all(dir).map_err(LabError::io(format!("create {}", dir.display())))
}

/// File-name-safe form of a label.
pub(crate) fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' {
                c
            } else {
                '-'
            }
        })
        .collect()
}
