use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diffmodels::{CriticNet, FusionModel};
use crate::error::{FusionError, Result};

/// Per-column affine map fitted on training covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Columns with zero spread keep unit scale.
    pub fn fit(x: ArrayView2<'_, f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let mut scale = Vec::with_capacity(x.ncols());
        for (j, col) in x.columns().into_iter().enumerate() {
            let var = col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
            scale.push(if var > 1e-12 { var.sqrt() } else { 1.0 });
        }
        Self {
            mean: mean.to_vec(),
            scale,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(FusionError::DimensionMismatch {
                context: "standardizer input",
                expected: self.mean.len(),
                got: x.ncols(),
            });
        }
        let mean = Array1::from(self.mean.clone());
        let scale = Array1::from(self.scale.clone());
        Ok((&x - &mean) / &scale)
    }
}

/// Full primal-dual state after training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub model: FusionModel<f64>,
    pub critic: CriticNet<f64>,
    pub nu: Vec<f64>,
    pub step_count: usize,
    pub standardizer: Standardizer,
}

impl ModelBundle {
    pub fn predict(&self, x: ArrayView2<'_, f64>, t: &[usize]) -> Result<Array1<f64>> {
        let xs = self.standardizer.apply(x)?;
        self.model.predict(xs.view(), t)
    }

    pub fn predict_all(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let xs = self.standardizer.apply(x)?;
        self.model.predict_all(xs.view())
    }

    /// `m(x, arm) - m(x, 0)`.
    pub fn effect(&self, x: ArrayView2<'_, f64>, arm: usize) -> Result<Array1<f64>> {
        let xs = self.standardizer.apply(x)?;
        self.model.effect(xs.view(), arm)
    }

    pub fn represent(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let xs = self.standardizer.apply(x)?;
        self.model.represent(xs.view())
    }

    /// Flat parameter arrays with their layouts.
    pub fn to_json(&self) -> serde_json::Value {
        let p = &self.model.predictor;
        json!({
            "step_count": self.step_count,
            "nu": self.nu,
            "standardizer": self.standardizer,
            "phi": self.model.phi.net.params,
            "predictor_trunk": p.trunk.params,
            "predictor_heads": p.heads,
            "critic": self.critic.net.params,
            "n_arms": self.critic.n_arms,
        })
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub r_obs: f64,
    pub g_norm: f64,
    pub eps_ov: f64,
    pub nu_norm: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// CSV with header `step, r_obs, g_norm, eps_ov, nu_norm, objective`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn standardizer_centers_and_scales() {
        let x = array![[1.0, 5.0], [3.0, 5.0]];
        let s = Standardizer::fit(x.view());
        let z = s.apply(x.view()).unwrap();
        assert_eq!(z, array![[-1.0, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn trace_csv_header() {
        let trace = TrainTrace {
            records: vec![TraceRecord {
                step: 0,
                r_obs: 1.0,
                g_norm: 0.5,
                eps_ov: 0.0,
                nu_norm: 0.0,
                objective: 1.25,
            }],
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,r_obs,g_norm,eps_ov,nu_norm,objective\n0,1.0,0.5,0.0,0.0,1.25"));
    }
}
