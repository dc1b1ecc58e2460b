use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bundle::Standardizer;
use crate::datagen::Dataset;
use crate::diffmodels::{Activation, InitScheme, Layout, Mlp, Tape, Trainable};
use crate::error::{FusionError, Result};

const RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TLearnerConfig {
    /// Empty means an exact least-squares fit per arm.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub eta: f64,
    pub iters: usize,
    pub batch: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TLearnerConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            eta: 1e-2,
            iters: 5000,
            batch: 256,
            grad_clip: Some(10.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ArmModel {
    Linear { intercept: f64, coef: Array1<f64> },
    Net(Mlp<f64>),
}

impl ArmModel {
    fn predict(&self, xs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        match self {
            ArmModel::Linear { intercept, coef } => Ok(xs.dot(coef) + *intercept),
            ArmModel::Net(net) => Ok(net.forward(xs)?.column(0).to_owned()),
        }
    }
}

/// Independent outcome regressions, one per arm.
#[derive(Debug, Clone, PartialEq)]
pub struct TLearner {
    arms: Vec<ArmModel>,
    pub standardizer: Standardizer,
}

impl TLearner {
    pub fn n_arms(&self) -> usize {
        self.arms.len()
    }

    pub fn predict_arm(&self, x: ArrayView2<'_, f64>, arm: usize) -> Result<Array1<f64>> {
        let model = self.arms.get(arm).ok_or(FusionError::InvalidTreatment {
            t: arm,
            n_arms: self.arms.len(),
        })?;
        model.predict(self.standardizer.apply(x)?.view())
    }

    pub fn predict_all(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let xs = self.standardizer.apply(x)?;
        let mut out = Array2::zeros((x.nrows(), self.arms.len()));
        for (k, m) in self.arms.iter().enumerate() {
            out.column_mut(k).assign(&m.predict(xs.view())?);
        }
        Ok(out)
    }

    /// `m_arm(x) - m_0(x)`.
    pub fn effect(&self, x: ArrayView2<'_, f64>, arm: usize) -> Result<Array1<f64>> {
        Ok(self.predict_arm(x, arm)? - self.predict_arm(x, 0)?)
    }
}

fn fit_linear(x: ArrayView2<'_, f64>, y: &[f64]) -> Result<ArmModel> {
    let (n, d) = x.dim();
    let design = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let gram = design.transpose() * &design + DMatrix::identity(d + 1, d + 1) * RIDGE;
    let rhs = design.transpose() * DVector::from_column_slice(y);
    let beta = gram
        .cholesky()
        .ok_or_else(|| FusionError::InvalidConfig("singular least-squares system".into()))?
        .solve(&rhs);
    Ok(ArmModel::Linear {
        intercept: beta[0],
        coef: beta.rows(1, d).iter().copied().collect(),
    })
}

fn fit_net(x: ArrayView2<'_, f64>, y: &[f64], cfg: &TLearnerConfig, seed: u64) -> Result<ArmModel> {
    let layout = Layout::dense(x.ncols(), &cfg.hidden, 1, cfg.activation, Activation::Identity)?;
    let mut net = Mlp::init(&layout, InitScheme::ScaledUniform, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut tape = Tape::default();
    let n = y.len();
    let b = cfg.batch.min(n);
    for step in 0..cfg.iters {
        let rows: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let xb = x.select(ndarray::Axis(0), &rows);
        let out = net.forward_record(xb.view(), &mut tape)?;
        let mut up = Array2::zeros((b, 1));
        let mut loss = 0.0;
        for (i, &r) in rows.iter().enumerate() {
            let e = out[(i, 0)] - y[r];
            loss += e * e;
            up[(i, 0)] = 2.0 * e / b as f64;
        }
        if !loss.is_finite() {
            return Err(FusionError::InvalidConfig(format!("T-learner diverged at step {step}")));
        }
        let mut grad = net.backward(&tape, up.view())?.params;
        if let Some(cap) = cfg.grad_clip {
            let gn = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gn > cap {
                grad.iter_mut().for_each(|g| *g *= cap / gn);
            }
        }
        net.step(-cfg.eta, &grad);
    }
    Ok(ArmModel::Net(net))
}

/// Fits each arm on the pooled rows (both sources) that received it.
pub fn train_t_learner(data: &Dataset, cfg: &TLearnerConfig) -> Result<TLearner> {
    if !(cfg.eta > 0.0) || cfg.batch == 0 {
        return Err(FusionError::InvalidConfig(
            "T-learner needs eta > 0 and batch >= 1".into(),
        ));
    }
    let standardizer = Standardizer::fit(data.x.view());
    let xs = standardizer.apply(data.x.view())?;
    let mut arms = Vec::with_capacity(data.n_arms);
    for arm in 0..data.n_arms {
        let rows: Vec<usize> = (0..data.len()).filter(|&i| data.t[i] == arm).collect();
        if rows.is_empty() {
            return Err(FusionError::EmptyArm(arm));
        }
        let xa = xs.select(ndarray::Axis(0), &rows);
        let ya = data.y_rows(&rows);
        arms.push(if cfg.hidden.is_empty() {
            fit_linear(xa.view(), &ya)?
        } else {
            fit_net(xa.view(), &ya, cfg, cfg.seed.wrapping_add(arm as u64 * 7919))?
        });
    }
    Ok(TLearner { arms, standardizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Source;
    use crate::moments::AssignmentProbs;
    use ndarray::Array2;

    fn linear_data(n: usize, effect: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let t: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 1.0 + 2.0 * x[(i, 0)] - x[(i, 2)] + effect * t[i] as f64)
            .collect();
        Dataset::new(x, t, y, vec![Source::Rct; n], AssignmentProbs::uniform(2).unwrap()).unwrap()
    }

    #[test]
    fn exact_fit_recovers_constant_effect() {
        let data = linear_data(200, 0.7, 1);
        let tl = train_t_learner(
            &data,
            &TLearnerConfig {
                hidden: vec![],
                ..TLearnerConfig::default()
            },
        )
        .unwrap();
        let tau = tl.effect(data.x.view(), 1).unwrap();
        assert!(tau.iter().all(|v| (v - 0.7).abs() < 1e-3));
    }

    #[test]
    fn empty_arm_is_typed() {
        let mut data = linear_data(20, 0.0, 2);
        data.t.iter_mut().for_each(|t| *t = 0);
        assert!(matches!(
            train_t_learner(&data, &TLearnerConfig::default()),
            Err(FusionError::EmptyArm(1))
        ));
    }

    #[test]
    fn net_fit_reduces_error() {
        let data = linear_data(400, 0.5, 3);
        let cfg = TLearnerConfig {
            hidden: vec![16],
            iters: 1500,
            batch: 64,
            eta: 5e-2,
            ..TLearnerConfig::default()
        };
        let tl = train_t_learner(&data, &cfg).unwrap();
        let tau = tl.effect(data.x.view(), 1).unwrap();
        let mse = tau.iter().map(|v| (v - 0.5).powi(2)).sum::<f64>() / tau.len() as f64;
        assert!(mse < 0.05, "{mse}");
    }
}
