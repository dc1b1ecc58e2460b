//! Experiment orchestration behind the `fusion` command line: dataset
//! generation, method grids over seeds and overlap dials, the theory
//! verification suite and feasibility audits.

mod audit;
mod config;
mod data;
mod run;
mod theory;

pub use audit::{audit_seeds, AuditRow};
pub use config::{DatasetSpec, ExperimentConfig, Method, TableStyle, PRESET_ITERS};
pub use data::{summarize_dataset, DataSummary};
pub use run::{grid_cells, run_cell, run_experiment, Cell, CellFailure, RunOutcome};
pub use theory::{run_theory_suite, TheoryOptions, TheoryReport, Verdict, CHECKS};

use sha2::{Digest, Sha256};

/// First eight bytes of `sha256(master_seed_le || id)`.
pub fn derive_seed(master_seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> crate::Result<()> {
    run::write_json(path, value)
}
