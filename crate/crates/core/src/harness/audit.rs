use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::config::DatasetSpec;
use super::derive_seed;
use crate::error::Result;
use crate::estimators::{train_constrained_pd, TrainConfig};
use crate::feasibility::{audit_feasibility, FeasibilityAudit, GapConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub seed: u64,
    pub dial: f64,
    pub audit: FeasibilityAudit,
    /// `gap_phi <= gap_raw`.
    pub representation_no_worse: bool,
}

/// Feasibility audit of one dataset per seed, fitting gaps on one half of the
/// randomized rows and evaluating on the other. With `phi_train`, a
/// primal-dual model is trained first and its representation supplies the
/// overlap and information terms.
pub fn audit_seeds(
    spec: &DatasetSpec,
    dial: f64,
    seeds: &[u64],
    gap: &GapConfig,
    phi_train: Option<&TrainConfig>,
) -> Result<Vec<AuditRow>> {
    seeds
        .iter()
        .map(|&seed| {
            let data = spec.materialize(dial, seed)?;
            let (fit, eval) = data.split_holdout(0.5, derive_seed(0, &format!("audit-split/seed={seed}")))?;
            let gcfg = GapConfig { seed, ..gap.clone() };
            let audit = match phi_train {
                Some(tc) => {
                    let (bundle, _) = train_constrained_pd(&fit, &TrainConfig { seed, ..tc.clone() })?;
                    let phi = |x: ArrayView2<'_, f64>| -> Result<Array2<f64>> { bundle.represent(x) };
                    audit_feasibility(&fit, &eval, &gcfg, Some(&phi))?
                }
                None => audit_feasibility(&fit, &eval, &gcfg, None)?,
            };
            Ok(AuditRow {
                seed,
                dial,
                representation_no_worse: audit.gap_phi <= audit.gap_raw,
                audit,
            })
        })
        .collect()
}
