//! Overlap discrepancies between the randomized and observational laws of
//! `(phi(X), T)`: a Gaussian-kernel MMD, a bounded-critic IPM surrogate, and
//! direct treatment-assignment diagnostics.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Source};
use crate::diffmodels::{CriticNet, Tape, Trainable};
use crate::error::{FusionError, Result};
use crate::scalar::Scalar;

/// Pooled points used for the median bandwidth heuristic.
const MEDIAN_SUBSAMPLE: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IpmKind {
    KernelMmd,
    Critic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpmEstimate {
    /// Nonnegative reported value.
    pub value: f64,
    /// Value before clamping (squared MMD for the kernel estimator).
    pub raw: f64,
    pub kind: IpmKind,
    pub bandwidth: Option<f64>,
}

fn sq_norms<S: Scalar>(a: ArrayView2<'_, S>) -> Array1<S> {
    a.rows().into_iter().map(|r| r.dot(&r)).collect()
}

fn sq_dists<S: Scalar>(a: ArrayView2<'_, S>, b: ArrayView2<'_, S>) -> Array2<S> {
    let na = sq_norms(a);
    let nb = sq_norms(b);
    let mut d = a.dot(&b.t());
    let two = S::lit(2.0);
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (na[i] + nb[j] - two * *v).max(S::zero());
    }
    d
}

/// `exp(-|a - b|^2 / (2 bw^2))` for every row pair.
pub fn gaussian_gram<S: Scalar>(a: ArrayView2<'_, S>, b: ArrayView2<'_, S>, bandwidth: S) -> Array2<S> {
    let scale = -S::one() / (S::lit(2.0) * bandwidth * bandwidth);
    sq_dists(a, b).mapv_into(|v| (v * scale).exp())
}

/// Median pairwise Euclidean distance over the pooled rows, taken on an
/// evenly strided subsample when the pool exceeds 2000 rows.
pub fn median_bandwidth<S: Scalar>(a: ArrayView2<'_, S>, b: ArrayView2<'_, S>) -> Result<S> {
    let pooled = ndarray::concatenate(Axis(0), &[a, b]).map_err(|_| FusionError::DimensionMismatch {
        context: "pooled kernel sample",
        expected: a.ncols(),
        got: b.ncols(),
    })?;
    let n = pooled.nrows();
    if n < 2 {
        return Err(FusionError::Empty("bandwidth sample"));
    }
    let pool = if n > MEDIAN_SUBSAMPLE {
        let idx: Vec<usize> = (0..MEDIAN_SUBSAMPLE).map(|i| i * n / MEDIAN_SUBSAMPLE).collect();
        pooled.select(Axis(0), &idx)
    } else {
        pooled
    };
    let d = sq_dists(pool.view(), pool.view());
    let m = pool.nrows();
    let mut upper: Vec<S> = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            upper.push(d[[i, j]]);
        }
    }
    let mid = upper.len() / 2;
    let (_, med, _) = upper.select_nth_unstable_by(mid, |x, y| x.partial_cmp(y).expect("finite distances"));
    let bw = med.sqrt();
    Ok(if bw > S::zero() { bw } else { S::one() })
}

fn check_samples<S>(a: ArrayView2<'_, S>, b: ArrayView2<'_, S>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(FusionError::Empty("kernel sample"));
    }
    if a.ncols() != b.ncols() {
        return Err(FusionError::DimensionMismatch {
            context: "kernel samples",
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    Ok(())
}

fn mean<S: Scalar>(m: &Array2<S>) -> S {
    m.sum() / S::from_count(m.len())
}

/// Biased V-statistic MMD between two samples of joint `(z, one_hot(t))`
/// rows; `None` bandwidth selects the median heuristic.
pub fn mmd_joint<S: Scalar>(
    rct: ArrayView2<'_, S>,
    obs: ArrayView2<'_, S>,
    bandwidth: Option<S>,
) -> Result<IpmEstimate> {
    check_samples(rct, obs)?;
    let bw = match bandwidth {
        Some(bw) => bw,
        None => median_bandwidth(rct, obs)?,
    };
    let kxx = gaussian_gram(rct, rct, bw);
    let kyy = gaussian_gram(obs, obs, bw);
    let kxy = gaussian_gram(rct, obs, bw);
    let mmd2 = mean(&kxx) + mean(&kyy) - S::lit(2.0) * mean(&kxy);
    Ok(IpmEstimate {
        value: mmd2.max(S::zero()).sqrt().to_f64_lossy(),
        raw: mmd2.to_f64_lossy(),
        kind: IpmKind::KernelMmd,
        bandwidth: Some(bw.to_f64_lossy()),
    })
}

/// MMD with its gradient with respect to every row of both samples at a fixed
/// bandwidth. The gradient of `MMD = sqrt(MMD^2)` uses `max(MMD, 1e-6)` in the
/// denominator.
pub struct MmdGrad<S> {
    pub value: S,
    pub grad_rct: Array2<S>,
    pub grad_obs: Array2<S>,
}

pub fn mmd_with_grad<S: Scalar>(rct: ArrayView2<'_, S>, obs: ArrayView2<'_, S>, bandwidth: S) -> Result<MmdGrad<S>> {
    check_samples(rct, obs)?;
    let blocks = [sq_dists(rct, rct), sq_dists(obs, obs), sq_dists(rct, obs)];
    Ok(mmd_grad_from_blocks(rct, obs, blocks, bandwidth))
}

/// As [`mmd_with_grad`] with the median bandwidth, reusing the pairwise
/// distances. Identical to calling [`median_bandwidth`] first whenever the
/// pool has at most 2000 rows.
pub fn mmd_with_grad_median<S: Scalar>(rct: ArrayView2<'_, S>, obs: ArrayView2<'_, S>) -> Result<MmdGrad<S>> {
    check_samples(rct, obs)?;
    if rct.nrows() + obs.nrows() > MEDIAN_SUBSAMPLE {
        return mmd_with_grad(rct, obs, median_bandwidth(rct, obs)?);
    }
    let blocks = [sq_dists(rct, rct), sq_dists(obs, obs), sq_dists(rct, obs)];
    let mut pairs: Vec<S> = Vec::new();
    for d in &blocks[..2] {
        for i in 0..d.nrows() {
            pairs.extend(d.row(i).iter().skip(i + 1).copied());
        }
    }
    pairs.extend(blocks[2].iter().copied());
    let bandwidth = if pairs.is_empty() {
        S::one()
    } else {
        let mid = pairs.len() / 2;
        let (_, med, _) = pairs.select_nth_unstable_by(mid, |x, y| x.partial_cmp(y).expect("finite distances"));
        let bw = med.sqrt();
        if bw > S::zero() {
            bw
        } else {
            S::one()
        }
    };
    Ok(mmd_grad_from_blocks(rct, obs, blocks, bandwidth))
}

fn mmd_grad_from_blocks<S: Scalar>(
    rct: ArrayView2<'_, S>,
    obs: ArrayView2<'_, S>,
    blocks: [Array2<S>; 3],
    bandwidth: S,
) -> MmdGrad<S> {
    let (n, m) = (S::from_count(rct.nrows()), S::from_count(obs.nrows()));
    let scale = -S::one() / (S::lit(2.0) * bandwidth * bandwidth);
    let [kxx, kyy, kxy] = blocks.map(|d| d.mapv_into(|v| (v * scale).exp()));
    let mmd2 = mean(&kxx) + mean(&kyy) - S::lit(2.0) * mean(&kxy);
    let value = mmd2.max(S::zero()).sqrt();
    let inv_bw2 = S::one() / (bandwidth * bandwidth);

    // sum_j K_ij (a_i - b_j) = a_i rowsum(K)_i - (K b)_i
    let pull = |k: ArrayView2<'_, S>, a: ArrayView2<'_, S>, b: ArrayView2<'_, S>| -> Array2<S> {
        let rows = k.sum_axis(Axis(1)).insert_axis(Axis(1));
        &a * &rows - k.dot(&b)
    };
    let two = S::lit(2.0);
    let outer = S::one() / (two * value.max(S::lit(1e-6)));
    let cx = -two * inv_bw2 / (n * n) * outer;
    let cxy = two * inv_bw2 / (n * m) * outer;
    let cy = -two * inv_bw2 / (m * m) * outer;
    let grad_rct = pull(kxx.view(), rct, rct) * cx + pull(kxy.view(), rct, obs) * cxy;
    let grad_obs = pull(kyy.view(), obs, obs) * cy + pull(kxy.t(), obs, rct) * cxy;
    MmdGrad {
        value,
        grad_rct,
        grad_obs,
    }
}

/// One ascent step of the bounded critic on
/// `mean d(z_r, t_r) - mean d(z_o, t_o)`; returns the post-step objective.
pub fn critic_ipm_step<S: Scalar>(
    critic: &mut CriticNet<S>,
    z_rct: ArrayView2<'_, S>,
    t_rct: &[usize],
    z_obs: ArrayView2<'_, S>,
    t_obs: &[usize],
    step_size: S,
) -> Result<IpmEstimate> {
    let grad = critic_objective_grad(critic, z_rct, t_rct, z_obs, t_obs)?;
    critic.step(step_size, &grad);
    let obj = critic_objective(critic, z_rct, t_rct, z_obs, t_obs)?;
    Ok(IpmEstimate {
        value: obj.max(S::zero()).to_f64_lossy(),
        raw: obj.to_f64_lossy(),
        kind: IpmKind::Critic,
        bandwidth: None,
    })
}

pub fn critic_objective<S: Scalar>(
    critic: &CriticNet<S>,
    z_rct: ArrayView2<'_, S>,
    t_rct: &[usize],
    z_obs: ArrayView2<'_, S>,
    t_obs: &[usize],
) -> Result<S> {
    check_samples(z_rct, z_obs)?;
    let dr = critic.evaluate(z_rct, t_rct)?;
    let d_o = critic.evaluate(z_obs, t_obs)?;
    Ok(dr.sum() / S::from_count(dr.len()) - d_o.sum() / S::from_count(d_o.len()))
}

fn critic_objective_grad<S: Scalar>(
    critic: &CriticNet<S>,
    z_rct: ArrayView2<'_, S>,
    t_rct: &[usize],
    z_obs: ArrayView2<'_, S>,
    t_obs: &[usize],
) -> Result<Vec<S>> {
    check_samples(z_rct, z_obs)?;
    let mut tape = Tape::default();
    critic.forward_record(z_rct, t_rct, &mut tape)?;
    let up = Array1::from_elem(z_rct.nrows(), S::one() / S::from_count(z_rct.nrows()));
    let mut g = critic.backward(&tape, up.view())?.params;
    critic.forward_record(z_obs, t_obs, &mut tape)?;
    let up = Array1::from_elem(z_obs.nrows(), -S::one() / S::from_count(z_obs.nrows()));
    for (a, b) in g.iter_mut().zip(critic.backward(&tape, up.view())?.params) {
        *a += b;
    }
    Ok(g)
}

/// Treatment-marginal comparison of the two sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTv {
    pub p_rct: Vec<f64>,
    pub p_obs: Vec<f64>,
    /// `|p_rct[k] - p_obs[k]|`.
    pub per_arm_gap: Vec<f64>,
    /// `max_A |P_r(T in A) - P_o(T in A)| = 1/2 sum_k |gap_k|`.
    pub tv: f64,
    /// Arms with `p_obs = 0 < p_rct`.
    pub flagged: Vec<usize>,
}

fn frequencies(t: &[usize], n_arms: usize) -> Result<Vec<f64>> {
    if t.is_empty() {
        return Err(FusionError::Empty("treatment sample"));
    }
    let mut counts = vec![0usize; n_arms];
    for &a in t {
        if a >= n_arms {
            return Err(FusionError::InvalidTreatment { t: a, n_arms });
        }
        counts[a] += 1;
    }
    Ok(counts.iter().map(|&c| c as f64 / t.len() as f64).collect())
}

pub fn marginal_treatment_tv(t_rct: &[usize], t_obs: &[usize], n_arms: usize) -> Result<MarginalTv> {
    let p_rct = frequencies(t_rct, n_arms)?;
    let p_obs = frequencies(t_obs, n_arms)?;
    let per_arm_gap: Vec<f64> = p_rct.iter().zip(&p_obs).map(|(a, b)| (a - b).abs()).collect();
    let tv = 0.5 * per_arm_gap.iter().sum::<f64>();
    let flagged = (0..n_arms).filter(|&k| p_obs[k] == 0.0 && p_rct[k] > 0.0).collect();
    Ok(MarginalTv {
        p_rct,
        p_obs,
        per_arm_gap,
        tv,
        flagged,
    })
}

/// [`marginal_treatment_tv`] between the two sources of one pooled dataset.
pub fn marginal_treatment_tv_pooled(ds: &Dataset) -> Result<MarginalTv> {
    let rct = ds.t_rows(&ds.rows_of(Source::Rct));
    let obs = ds.t_rows(&ds.rows_of(Source::Obs));
    marginal_treatment_tv(&rct, &obs, ds.n_arms)
}

/// Maps every row of a dataset to a bin id.
pub trait Binner {
    fn assign(&self, ds: &Dataset) -> Result<Vec<usize>>;
}

/// Which coordinates a [`QuantileBinner`] reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinAxes {
    Covariates(Vec<usize>),
    Latent,
}

/// Product of per-axis quantile bins fitted on the pooled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileBinner {
    pub axes: BinAxes,
    pub bins_per_axis: usize,
}

impl QuantileBinner {
    /// Five bins per axis on the latent coordinates when present, else on the
    /// first two covariates.
    pub fn default_for(ds: &Dataset) -> Self {
        Self {
            axes: if ds.z_latent.is_some() {
                BinAxes::Latent
            } else {
                BinAxes::Covariates(vec![0, 1.min(ds.dim().saturating_sub(1))])
            },
            bins_per_axis: 5,
        }
    }

    fn columns(&self, ds: &Dataset) -> Result<Array2<f64>> {
        match &self.axes {
            BinAxes::Latent => ds.z_latent.clone().ok_or(FusionError::NotSynthetic),
            BinAxes::Covariates(cols) => {
                if let Some(&bad) = cols.iter().find(|&&c| c >= ds.dim()) {
                    return Err(FusionError::DimensionMismatch {
                        context: "binning column",
                        expected: ds.dim(),
                        got: bad,
                    });
                }
                Ok(ds.x.select(Axis(1), cols))
            }
        }
    }
}

impl Binner for QuantileBinner {
    fn assign(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let b = self.bins_per_axis.max(1);
        let cols = self.columns(ds)?;
        let n = cols.nrows();
        if n == 0 {
            return Err(FusionError::Empty("binning sample"));
        }
        let mut ids = vec![0usize; n];
        let mut stride = 1;
        for col in cols.columns() {
            let mut sorted = col.to_vec();
            sorted.sort_by(|a, c| a.total_cmp(c));
            let edges: Vec<f64> = (1..b).map(|q| sorted[q * n / b]).collect();
            for (id, &v) in ids.iter_mut().zip(col.iter()) {
                *id += stride * edges.iter().filter(|&&e| v >= e).count();
            }
            stride *= b;
        }
        Ok(ids)
    }
}

/// Bins by fixed cut points on one covariate: bin `i` holds `cuts[i-1] < x <= cuts[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CutBinner {
    pub column: usize,
    pub cuts: Vec<f64>,
}

impl Binner for CutBinner {
    fn assign(&self, ds: &Dataset) -> Result<Vec<usize>> {
        if self.column >= ds.dim() {
            return Err(FusionError::DimensionMismatch {
                context: "binning column",
                expected: ds.dim(),
                got: self.column,
            });
        }
        Ok(ds
            .x
            .column(self.column)
            .iter()
            .map(|&v| self.cuts.iter().filter(|&&c| v > c).count())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchRow {
    pub bin_id: usize,
    pub arm: usize,
    pub p_rct: Option<f64>,
    pub p_obs: Option<f64>,
    pub gap: Option<f64>,
    pub n_rct: usize,
    pub n_obs: usize,
    /// Bin populated by only one source.
    pub support_mismatch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchTable {
    pub rows: Vec<MismatchRow>,
    /// Count-weighted mean over shared bins of `1/2 sum_k gap_k`.
    pub aggregate: f64,
    /// `1/2 sum_{bin, k} |P_r(bin, T = k) - P_o(bin, T = k)|`, one-sided bins included.
    pub joint_mass_tv: f64,
    pub n_flagged_bins: usize,
}

impl MismatchTable {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bin_id", "arm", "p_rct", "p_obs", "gap", "n_rct", "n_obs"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.bin_id.to_string(),
                r.arm.to_string(),
                opt(r.p_rct),
                opt(r.p_obs),
                opt(r.gap),
                r.n_rct.to_string(),
                r.n_obs.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-bin, per-arm `|P_r(T = k | bin) - P_o(T = k | bin)|`.
pub fn conditional_assignment_mismatch(ds: &Dataset, binner: &dyn Binner) -> Result<MismatchTable> {
    let bins = binner.assign(ds)?;
    let k = ds.n_arms;
    // bin -> (rct counts per arm, obs counts per arm)
    let mut counts: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for i in 0..ds.len() {
        let e = counts.entry(bins[i]).or_insert_with(|| (vec![0; k], vec![0; k]));
        match ds.source[i] {
            Source::Rct => e.0[ds.t[i]] += 1,
            Source::Obs => e.1[ds.t[i]] += 1,
        }
    }
    let mut rows = Vec::new();
    let (mut weighted, mut weight, mut flagged) = (0.0, 0.0, 0);
    let (tot_r, tot_o) = (ds.count(Source::Rct).max(1) as f64, ds.count(Source::Obs).max(1) as f64);
    let mut joint = 0.0;
    for (&bin_id, (cr, co)) in &counts {
        let (nr, no): (usize, usize) = (cr.iter().sum(), co.iter().sum());
        joint += cr
            .iter()
            .zip(co)
            .map(|(&a, &b)| (a as f64 / tot_r - b as f64 / tot_o).abs())
            .sum::<f64>();
        let mismatch = nr == 0 || no == 0;
        if mismatch {
            flagged += 1;
        }
        let mut tv = 0.0;
        for arm in 0..k {
            let p_rct = (nr > 0).then(|| cr[arm] as f64 / nr as f64);
            let p_obs = (no > 0).then(|| co[arm] as f64 / no as f64);
            let gap = p_rct.zip(p_obs).map(|(a, b)| (a - b).abs());
            tv += gap.unwrap_or(0.0);
            rows.push(MismatchRow {
                bin_id,
                arm,
                p_rct,
                p_obs,
                gap,
                n_rct: nr,
                n_obs: no,
                support_mismatch: mismatch,
            });
        }
        if !mismatch {
            let w = (nr + no) as f64;
            weighted += w * 0.5 * tv;
            weight += w;
        }
    }
    Ok(MismatchTable {
        rows,
        aggregate: if weight > 0.0 { weighted / weight } else { 0.0 },
        joint_mass_tv: 0.5 * joint,
        n_flagged_bins: flagged,
    })
}
