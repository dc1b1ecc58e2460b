//! Experimental moment machinery.
//!
//! For arms `k = 1..=K` (arm 0 is the reference) the moment map is
//! `psi_k = (1{t = k} - p_k) (y - m(x, t))`. Under randomization its mean
//! vanishes at the true conditional mean, and any covariate-only shift of the
//! predictor leaves it unchanged.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Source};
use crate::diffmodels::{FusionModel, FusionTape, Trainable};
use crate::error::{FusionError, Result};
use crate::scalar::Scalar;

const PROB_SUM_TOL: f64 = 1e-12;

/// Known randomization probabilities, either marginal or per stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentProbs<S> {
    Marginal(Vec<S>),
    Stratified(Vec<Vec<S>>),
}

fn validate_row<S: Scalar>(p: &[S]) -> Result<()> {
    if p.len() < 2 {
        return Err(FusionError::InvalidProbabilities("need at least two arms".into()));
    }
    if let Some(bad) = p.iter().find(|&&v| !(v > S::zero() && v < S::one())) {
        return Err(FusionError::InvalidProbabilities(format!(
            "probability {bad} outside (0, 1)"
        )));
    }
    let total: S = p.iter().copied().sum();
    if (total - S::one()).abs().to_f64_lossy() > PROB_SUM_TOL {
        return Err(FusionError::InvalidProbabilities(format!(
            "probabilities sum to {total}"
        )));
    }
    Ok(())
}

impl<S: Scalar> AssignmentProbs<S> {
    pub fn marginal(p: Vec<S>) -> Result<Self> {
        validate_row(&p)?;
        Ok(Self::Marginal(p))
    }

    pub fn stratified(table: Vec<Vec<S>>) -> Result<Self> {
        let first = table.first().ok_or(FusionError::Empty("stratum table"))?.len();
        for row in &table {
            if row.len() != first {
                return Err(FusionError::InvalidProbabilities("ragged stratum table".into()));
            }
            validate_row(row)?;
        }
        Ok(Self::Stratified(table))
    }

    /// Equal probability `1 / n_arms` for every arm.
    pub fn uniform(n_arms: usize) -> Result<Self> {
        Self::marginal(vec![S::one() / S::from_count(n_arms); n_arms])
    }

    pub fn n_arms(&self) -> usize {
        match self {
            Self::Marginal(p) => p.len(),
            Self::Stratified(t) => t[0].len(),
        }
    }

    /// Probability row that applies to a sample in `stratum`.
    pub fn row(&self, stratum: Option<usize>) -> Result<&[S]> {
        match (self, stratum) {
            (Self::Marginal(p), _) => Ok(p),
            (Self::Stratified(t), Some(s)) => t
                .get(s)
                .map(Vec::as_slice)
                .ok_or_else(|| FusionError::InvalidProbabilities(format!("unknown stratum {s}"))),
            (Self::Stratified(_), None) => Err(FusionError::InvalidProbabilities(
                "stratified probabilities need a stratum id".into(),
            )),
        }
    }
}

/// Moment vector of one observation; component `k - 1` holds arm `k`.
pub fn psi<S: Scalar>(y: S, t: usize, m_val: S, probs: &[S]) -> Result<Vec<S>> {
    let n_arms = probs.len();
    if t >= n_arms {
        return Err(FusionError::InvalidTreatment { t, n_arms });
    }
    let r = y - m_val;
    Ok((1..n_arms).map(|k| (indicator::<S>(t == k) - probs[k]) * r).collect())
}

#[inline]
fn indicator<S: Scalar>(b: bool) -> S {
    if b {
        S::one()
    } else {
        S::zero()
    }
}

/// Sample mean of the moment map over a randomized sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentResidual<S> {
    pub g: Vec<S>,
    pub n_used: usize,
}

impl<S: Scalar> MomentResidual<S> {
    pub fn norm(&self) -> S {
        self.g.iter().map(|&v| v * v).sum::<S>().sqrt()
    }
}

/// `(1/n) sum_i psi(y_i, t_i, m_i)`.
pub fn moment_residual<S: Scalar>(
    y: &[S],
    t: &[usize],
    m: &[S],
    probs: &AssignmentProbs<S>,
    strata: Option<&[usize]>,
) -> Result<MomentResidual<S>> {
    let n = y.len();
    if n == 0 {
        return Err(FusionError::Empty("moment batch"));
    }
    if t.len() != n || m.len() != n {
        return Err(FusionError::LengthMismatch {
            left: n,
            right: t.len().min(m.len()),
        });
    }
    let k_dim = probs.n_arms() - 1;
    let mut g = vec![S::zero(); k_dim];
    for i in 0..n {
        let p = probs.row(strata.map(|s| s[i]))?;
        let contrib = psi(y[i], t[i], m[i], p)?;
        for (acc, c) in g.iter_mut().zip(contrib) {
            *acc += c;
        }
    }
    let inv = S::one() / S::from_count(n);
    g.iter_mut().for_each(|v| *v *= inv);
    Ok(MomentResidual { g, n_used: n })
}

fn check_randomized(data: &Dataset, rows: &[usize]) -> Result<()> {
    if rows.is_empty() {
        return Err(FusionError::Empty("moment batch"));
    }
    let obs = rows.iter().filter(|&&i| data.source[i] == Source::Obs).count();
    if obs > 0 {
        return Err(FusionError::NonRandomizedRows(obs));
    }
    Ok(())
}

/// Moment residual of `model` on the randomized rows `rows` of `data`.
pub fn empirical_moment_residual(
    data: &Dataset,
    rows: &[usize],
    model: &FusionModel<f64>,
) -> Result<MomentResidual<f64>> {
    check_randomized(data, rows)?;
    let x = data.x_rows(rows);
    let t = data.t_rows(rows);
    let y = data.y_rows(rows);
    let m = model.predict(x.view(), &t)?;
    let strata = data.strata_rows(rows);
    moment_residual(
        &y,
        &t,
        m.as_slice().expect("contiguous"),
        &data.probs,
        strata.as_deref(),
    )
}

/// Jacobian of the empirical moment residual with respect to the flat model
/// parameters (representation first, then predictor); shape `K x P`.
///
/// Row `k - 1` is `mean_i -(1{t_i = k} - p_k) dm(phi(x_i), t_i)/dparams`.
pub fn moment_grad(data: &Dataset, rows: &[usize], model: &FusionModel<f64>) -> Result<Array2<f64>> {
    check_randomized(data, rows)?;
    let x = data.x_rows(rows);
    let t = data.t_rows(rows);
    let strata = data.strata_rows(rows);
    moment_jacobian(x.view(), &t, &data.probs, strata.as_deref(), model)
}

pub fn moment_jacobian<S: Scalar>(
    x: ArrayView2<'_, S>,
    t: &[usize],
    probs: &AssignmentProbs<S>,
    strata: Option<&[usize]>,
    model: &FusionModel<S>,
) -> Result<Array2<S>> {
    let n = t.len();
    if n == 0 {
        return Err(FusionError::Empty("moment batch"));
    }
    let mut tape = FusionTape::default();
    model.forward_record(x, t, &mut tape)?;
    let k_dim = probs.n_arms() - 1;
    let inv = S::one() / S::from_count(n);
    let mut jac = Array2::<S>::zeros((k_dim, model.num_params()));
    for k in 1..=k_dim {
        let mut up = ndarray::Array1::<S>::zeros(n);
        for i in 0..n {
            let p = probs.row(strata.map(|s| s[i]))?;
            up[i] = -(indicator::<S>(t[i] == k) - p[k]) * inv;
        }
        let g = model.backward(&tape, up.view(), None)?;
        for (dst, src) in jac.row_mut(k - 1).iter_mut().zip(g.flat()) {
            *dst = src;
        }
    }
    Ok(jac)
}

/// Per-arm standardized mean of `(1{t = k} - p_k) u(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceScore {
    pub arm: usize,
    pub mean: f64,
    pub sd: f64,
    pub z: f64,
    /// Zero spread with a nonzero mean.
    pub violation: bool,
}

/// z-scores of the baseline-invariance identity `E[(D_k - p_k) u(X)] = 0`
/// for a covariate function evaluated at every sample (`u_values`).
pub fn baseline_invariance_check<S: Scalar>(
    t: &[usize],
    u_values: &[S],
    probs: &AssignmentProbs<S>,
    strata: Option<&[usize]>,
) -> Result<Vec<InvarianceScore>> {
    let n = t.len();
    if n < 2 {
        return Err(FusionError::Empty("invariance sample"));
    }
    if u_values.len() != n {
        return Err(FusionError::LengthMismatch {
            left: n,
            right: u_values.len(),
        });
    }
    let n_arms = probs.n_arms();
    (1..n_arms)
        .map(|k| {
            let mut vals = Vec::with_capacity(n);
            for i in 0..n {
                if t[i] >= n_arms {
                    return Err(FusionError::InvalidTreatment { t: t[i], n_arms });
                }
                let p = probs.row(strata.map(|s| s[i]))?[k];
                vals.push(((indicator::<S>(t[i] == k) - p) * u_values[i]).to_f64_lossy());
            }
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sd = var.sqrt();
            let (z, violation) = if sd > 0.0 {
                (mean / (sd / (n as f64).sqrt()), false)
            } else if mean == 0.0 {
                (0.0, false)
            } else {
                (mean.signum() * f64::INFINITY, true)
            };
            Ok(InvarianceScore {
                arm: k,
                mean,
                sd,
                z,
                violation,
            })
        })
        .collect()
}

/// The moment split into its baseline and causal parts on one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentDecomposition {
    pub direct: Vec<f64>,
    pub baseline: Vec<f64>,
    pub causal: Vec<f64>,
}

/// Decomposes the empirical moment using potential outcomes.
///
/// `potential[[i, a]]` is `Y_i(a)`; `heads[[i, a]]` is `m(x_i, a)`. With
/// `u = m(., 0)` and `h_a = m(., a) - u`, the moment equals
/// `mean (D_k - p_k)(Y(0) - u)` plus `mean (D_k - p_k) sum_a D_a (Y(a) - Y(0) - h_a)`.
pub fn decompose_moment(
    potential: ArrayView2<'_, f64>,
    t: &[usize],
    heads: ArrayView2<'_, f64>,
    probs: &AssignmentProbs<f64>,
    strata: Option<&[usize]>,
) -> Result<MomentDecomposition> {
    let n = t.len();
    if n == 0 {
        return Err(FusionError::Empty("decomposition sample"));
    }
    let n_arms = probs.n_arms();
    if potential.dim() != (n, n_arms) || heads.dim() != (n, n_arms) {
        return Err(FusionError::DimensionMismatch {
            context: "potential outcomes / heads",
            expected: n * n_arms,
            got: potential.len().min(heads.len()),
        });
    }
    let k_dim = n_arms - 1;
    let mut direct = vec![0.0; k_dim];
    let mut baseline = vec![0.0; k_dim];
    let mut causal = vec![0.0; k_dim];
    for i in 0..n {
        let a = t[i];
        if a >= n_arms {
            return Err(FusionError::InvalidTreatment { t: a, n_arms });
        }
        let p = probs.row(strata.map(|s| s[i]))?;
        let y = potential[[i, a]];
        let y0 = potential[[i, 0]];
        let u = heads[[i, 0]];
        let resid_direct = y - heads[[i, a]];
        let resid_base = y0 - u;
        let resid_causal = if a == 0 {
            0.0
        } else {
            potential[[i, a]] - y0 - (heads[[i, a]] - u)
        };
        for k in 1..=k_dim {
            let w = if a == k { 1.0 } else { 0.0 } - p[k];
            direct[k - 1] += w * resid_direct;
            baseline[k - 1] += w * resid_base;
            causal[k - 1] += w * resid_causal;
        }
    }
    for v in direct.iter_mut().chain(baseline.iter_mut()).chain(causal.iter_mut()) {
        *v /= n as f64;
    }
    Ok(MomentDecomposition {
        direct,
        baseline,
        causal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psi_zero_residual() {
        let p = [0.5, 0.5];
        assert_eq!(psi(1.3, 1, 1.3, &p).unwrap(), vec![0.0]);
    }

    #[test]
    fn psi_hand_values() {
        assert_eq!(psi(2.0, 1, 1.0, &[0.5, 0.5]).unwrap(), vec![0.5]);
        assert_eq!(psi(4.0, 0, 0.0, &[0.5, 0.25, 0.25]).unwrap(), vec![-1.0, -1.0]);
    }

    #[test]
    fn psi_rejects_bad_arm() {
        assert!(matches!(
            psi(0.0, 3, 0.0, &[0.5, 0.5]),
            Err(FusionError::InvalidTreatment { t: 3, n_arms: 2 })
        ));
    }

    #[test]
    fn probabilities_validated() {
        assert!(AssignmentProbs::marginal(vec![0.5, 0.5]).is_ok());
        assert!(AssignmentProbs::marginal(vec![0.6, 0.5]).is_err());
        assert!(AssignmentProbs::marginal(vec![1.0, 0.0]).is_err());
        assert!(AssignmentProbs::stratified(vec![vec![0.5, 0.5], vec![0.2, 0.8]]).is_ok());
        assert!(AssignmentProbs::stratified(vec![vec![0.5, 0.5], vec![0.2, 0.7]]).is_err());
    }

    #[test]
    fn stratified_rows_are_used() {
        let probs = AssignmentProbs::<f64>::stratified(vec![vec![0.5, 0.5], vec![0.2, 0.8]]).unwrap();
        let r = moment_residual(&[1.0, 1.0], &[1, 1], &[0.0, 0.0], &probs, Some(&[0, 1])).unwrap();
        assert!((r.g[0] - (0.5 + 0.2) / 2.0).abs() < 1e-15);
        assert!(moment_residual(&[1.0], &[1], &[0.0], &probs, None).is_err());
    }

    #[test]
    fn single_row_residual_is_psi() {
        let probs = AssignmentProbs::marginal(vec![0.5, 0.25, 0.25]).unwrap();
        let r = moment_residual(&[3.0], &[2], &[1.0], &probs, None).unwrap();
        assert_eq!(r.g, psi(3.0, 2, 1.0, &[0.5, 0.25, 0.25]).unwrap());
        assert_eq!(r.n_used, 1);
    }

    #[test]
    fn empty_batch_is_typed() {
        let probs = AssignmentProbs::<f64>::uniform(2).unwrap();
        assert!(matches!(
            moment_residual(&[], &[], &[], &probs, None),
            Err(FusionError::Empty(_))
        ));
    }

    #[test]
    fn invariance_zero_function() {
        let probs = AssignmentProbs::<f64>::uniform(2).unwrap();
        let scores = baseline_invariance_check(&[0, 1, 1, 0, 1], &[0.0; 5], &probs, None).unwrap();
        assert_eq!(scores[0].z, 0.0);
        assert!(!scores[0].violation);
    }

    #[test]
    fn invariance_constant_with_empirical_probs() {
        let t = [0usize, 1, 1, 0, 1, 2, 2, 1];
        let n = t.len() as f64;
        let freq: Vec<f64> = (0..3)
            .map(|k| t.iter().filter(|&&a| a == k).count() as f64 / n)
            .collect();
        let probs = AssignmentProbs::marginal(freq).unwrap();
        let scores = baseline_invariance_check(&t, &[1.0; 8], &probs, None).unwrap();
        for s in scores {
            assert!(s.z.abs() < 1e-9, "{s:?}");
        }
    }

    #[test]
    fn degenerate_spread_reported_as_violation() {
        // every sample treated with p_1 = 0.5: (1 - 0.5) * 1 constant and nonzero
        let probs = AssignmentProbs::<f64>::uniform(2).unwrap();
        let scores = baseline_invariance_check(&[1, 1, 1], &[1.0; 3], &probs, None).unwrap();
        assert!(scores[0].violation);
    }
}
