use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Source};
use crate::diffmodels::append_one_hot;
use crate::discrepancy::{marginal_treatment_tv_pooled, mmd_joint};
use crate::error::Result;
use crate::estimators::Standardizer;

const SUMMARY_MMD_ROWS: usize = 1000;

/// What `gen-data` prints and stores next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub n_rct: usize,
    pub n_obs: usize,
    pub arm_freq_rct: Vec<f64>,
    pub arm_freq_obs: Vec<f64>,
    pub marginal_tv: f64,
    /// Joint `(x, t)` MMD between the sources on pooled-standardized covariates.
    pub raw_mmd: f64,
}

fn strided(rows: &[usize]) -> Vec<usize> {
    let n = rows.len();
    if n <= SUMMARY_MMD_ROWS {
        return rows.to_vec();
    }
    (0..SUMMARY_MMD_ROWS).map(|i| rows[i * n / SUMMARY_MMD_ROWS]).collect()
}

pub fn summarize_dataset(ds: &Dataset) -> Result<DataSummary> {
    let rct = ds.require(Source::Rct)?;
    let obs = ds.require(Source::Obs)?;
    let std = Standardizer::fit(ds.x.view());
    let (rr, ro) = (strided(&rct), strided(&obs));
    let fr = append_one_hot(std.apply(ds.x_rows(&rr).view())?.view(), &ds.t_rows(&rr), ds.n_arms)?;
    let fo = append_one_hot(std.apply(ds.x_rows(&ro).view())?.view(), &ds.t_rows(&ro), ds.n_arms)?;
    Ok(DataSummary {
        n_rct: rct.len(),
        n_obs: obs.len(),
        arm_freq_rct: ds.arm_frequencies(Source::Rct),
        arm_freq_obs: ds.arm_frequencies(Source::Obs),
        marginal_tv: marginal_treatment_tv_pooled(ds)?.tv,
        raw_mmd: mmd_joint(fr.view(), fo.view(), None)?.value,
    })
}

impl std::fmt::Display for DataSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let freqs = |p: &[f64]| p.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ");
        writeln!(f, "rct rows      {}", self.n_rct)?;
        writeln!(f, "obs rows      {}", self.n_obs)?;
        writeln!(f, "rct arm freq  [{}]", freqs(&self.arm_freq_rct))?;
        writeln!(f, "obs arm freq  [{}]", freqs(&self.arm_freq_obs))?;
        writeln!(f, "marginal tv   {:.6}", self.marginal_tv)?;
        write!(f, "raw mmd       {:.6}", self.raw_mmd)
    }
}
