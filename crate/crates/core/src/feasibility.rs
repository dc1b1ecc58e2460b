//! Feasibility diagnostics: how small the randomized moment residual can be
//! made within a model family, in raw covariates or through a representation.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Source};
use crate::diffmodels::{
    append_one_hot, Activation, Architecture, FusionModel, PredictorNet, RepresentationNet, Trainable,
};
use crate::discrepancy::mmd_joint;
use crate::error::{FusionError, Result};
use crate::estimators::Standardizer;
use crate::moments::{moment_jacobian, moment_residual};

/// Rows per source kept for MMD evaluation.
const MMD_ROWS: usize = 1000;
const RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapFamily {
    /// Per-arm affine functions of the standardized covariates.
    RawLinear,
    /// Arm-headed network directly on the covariates.
    RawNet,
    /// Learned representation followed by an arm-headed network.
    RepNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapConfig {
    pub restarts: usize,
    /// Damped Gauss-Newton iterations per restart.
    pub iters: usize,
    pub damping: f64,
    pub arch: Architecture,
    pub seed: u64,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            restarts: 8,
            iters: 50,
            damping: 1e-8,
            arch: Architecture {
                rep_hidden: vec![32],
                rep_dim: 8,
                predictor_hidden: vec![32],
                critic_hidden: vec![],
                activation: Activation::Tanh,
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub family: GapFamily,
    /// Upper estimate of the infimum: best restart's residual on the evaluation rows.
    pub value: f64,
    pub per_restart: Vec<f64>,
    /// Residual of the best restart on the rows it was fitted on.
    pub fit_value: f64,
}

fn rct_parts(data: &Dataset, std: &Standardizer) -> Result<(Array2<f64>, Vec<usize>, Vec<f64>, Option<Vec<usize>>)> {
    let rows = data.require(Source::Rct)?;
    Ok((
        std.apply(data.x_rows(&rows).view())?,
        data.t_rows(&rows),
        data.y_rows(&rows),
        data.strata_rows(&rows),
    ))
}

fn residual_norm(data: &Dataset, y: &[f64], t: &[usize], m: &[f64], strata: Option<&[usize]>) -> Result<f64> {
    Ok(moment_residual(y, t, m, &data.probs, strata)?.norm())
}

/// Design for per-arm affine models: arm `a` owns columns `a (d + 1) ..`.
fn arm_design(x: ArrayView2<'_, f64>, t: &[usize], n_arms: usize) -> DMatrix<f64> {
    let d = x.ncols();
    let mut out = DMatrix::zeros(x.nrows(), n_arms * (d + 1));
    for (i, &a) in t.iter().enumerate() {
        let off = a * (d + 1);
        out[(i, off)] = 1.0;
        for j in 0..d {
            out[(i, off + 1 + j)] = x[(i, j)];
        }
    }
    out
}

/// Minimum-norm affine model minimizing `|g|`; the moment is affine in the
/// coefficients, so this is an exact least-squares problem.
fn linear_gap(
    fit: &Dataset,
    eval: &Dataset,
    x_fit: ArrayView2<'_, f64>,
    x_eval: ArrayView2<'_, f64>,
) -> Result<(f64, f64)> {
    let rows = fit.require(Source::Rct)?;
    let t = fit.t_rows(&rows);
    let y = fit.y_rows(&rows);
    let strata = fit.strata_rows(&rows);
    let n = t.len() as f64;
    let k_dim = fit.n_arms - 1;
    let design = arm_design(x_fit, &t, fit.n_arms);
    // g(theta) = g0 - J theta with row k of J = mean_i (D_ik - p_ik) design_i
    let mut jac = DMatrix::zeros(k_dim, design.ncols());
    let mut g0 = DVector::zeros(k_dim);
    for i in 0..t.len() {
        let p = fit.probs.row(strata.as_ref().map(|s| s[i]))?;
        for k in 1..=k_dim {
            let w = (if t[i] == k { 1.0 } else { 0.0 } - p[k]) / n;
            g0[k - 1] += w * y[i];
            for c in 0..design.ncols() {
                jac[(k - 1, c)] += w * design[(i, c)];
            }
        }
    }
    let pinv = jac
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| FusionError::InvalidConfig(e.to_string()))?;
    let theta = pinv * &g0;
    let fit_value = (&g0 - &jac * &theta).norm();

    let erows = eval.require(Source::Rct)?;
    let et = eval.t_rows(&erows);
    let m: Vec<f64> = (arm_design(x_eval, &et, eval.n_arms) * &theta)
        .iter()
        .copied()
        .collect();
    let value = residual_norm(eval, &eval.y_rows(&erows), &et, &m, eval.strata_rows(&erows).as_deref())?;
    Ok((value, fit_value))
}

/// Damped Gauss-Newton on `|g|^2 / 2` with halving line search.
fn minimize_net(model: &mut FusionModel<f64>, data: &Dataset, x: ArrayView2<'_, f64>, cfg: &GapConfig) -> Result<f64> {
    let rows = data.require(Source::Rct)?;
    let t = data.t_rows(&rows);
    let y = data.y_rows(&rows);
    let strata = data.strata_rows(&rows);
    let eval = |m: &FusionModel<f64>| -> Result<Vec<f64>> {
        let pred = m.predict(x, &t)?;
        Ok(moment_residual(
            &y,
            &t,
            pred.as_slice().expect("contiguous"),
            &data.probs,
            strata.as_deref(),
        )?
        .g)
    };
    let mut g = eval(model)?;
    let mut best = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    for _ in 0..cfg.iters {
        if best < 1e-15 {
            break;
        }
        let jac = moment_jacobian(x, &t, &data.probs, strata.as_deref(), model)?;
        let k = jac.nrows();
        let jm = DMatrix::from_fn(k, jac.ncols(), |r, c| jac[(r, c)]);
        let gram = &jm * jm.transpose() + DMatrix::identity(k, k) * cfg.damping;
        let Some(chol) = gram.cholesky() else { break };
        let coef = chol.solve(&DVector::from_column_slice(&g));
        let dir: Vec<f64> = (jm.transpose() * coef).iter().map(|v| -v).collect();
        let base = model.params_flat();
        let mut scale = 1.0;
        let mut improved = false;
        while scale > 1e-6 {
            model.step(scale, &dir);
            let g_new = eval(model)?;
            let nn = g_new.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nn.is_finite() && nn < best {
                best = nn;
                g = g_new;
                improved = true;
                break;
            }
            model.set_params_flat(&base)?;
            scale *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(best)
}

fn net_for(family: GapFamily, d: usize, n_arms: usize, cfg: &GapConfig, seed: u64) -> Result<FusionModel<f64>> {
    let a = &cfg.arch;
    Ok(match family {
        GapFamily::RawNet => FusionModel::new(
            RepresentationNet::identity(d),
            PredictorNet::new(d, &a.predictor_hidden, n_arms, a.activation, seed)?,
        ),
        _ => FusionModel::new(
            RepresentationNet::new(d, &a.rep_hidden, a.rep_dim, a.activation, seed)?,
            PredictorNet::new(a.rep_dim, &a.predictor_hidden, n_arms, a.activation, seed ^ 0xabcd)?,
        ),
    })
}

/// Minimizes `|g|` over `family` on the randomized rows of `fit` and reports
/// the residual of the best restart on the randomized rows of `eval`. Passing
/// the same dataset twice gives the in-sample value.
pub fn feasibility_gap(fit: &Dataset, eval: &Dataset, family: GapFamily, cfg: &GapConfig) -> Result<GapEstimate> {
    if cfg.restarts == 0 {
        return Err(FusionError::InvalidConfig("restarts must be at least 1".into()));
    }
    let std = Standardizer::fit(fit.x.view());
    let (x_fit, ..) = rct_parts(fit, &std)?;
    let (x_eval, t_eval, y_eval, s_eval) = rct_parts(eval, &std)?;
    if family == GapFamily::RawLinear {
        let (value, fit_value) = linear_gap(fit, eval, x_fit.view(), x_eval.view())?;
        return Ok(GapEstimate {
            family,
            value,
            per_restart: vec![value],
            fit_value,
        });
    }
    let mut per_restart = Vec::with_capacity(cfg.restarts);
    let mut best = (f64::INFINITY, f64::INFINITY);
    for r in 0..cfg.restarts {
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(r as u64);
        let mut model = net_for(family, fit.dim(), fit.n_arms, cfg, seed)?;
        let fit_value = minimize_net(&mut model, fit, x_fit.view(), cfg)?;
        let pred = model.predict(x_eval.view(), &t_eval)?;
        let value = residual_norm(
            eval,
            &y_eval,
            &t_eval,
            pred.as_slice().expect("contiguous"),
            s_eval.as_deref(),
        )?;
        per_restart.push(value);
        if value < best.0 {
            best = (value, fit_value);
        }
    }
    Ok(GapEstimate {
        family,
        value: best.0,
        per_restart,
        fit_value: best.1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapConstant {
    pub c0_hat: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// Randomized mass of the structural set.
    pub p_s: f64,
    pub delta_hat: f64,
}

/// `p_min (1 - p_max) P_r(S) delta`.
pub fn gap_constant(p_min: f64, p_max: f64, p_s: f64, delta: f64) -> f64 {
    p_min * (1.0 - p_max) * p_s * delta
}

/// Randomized rows in the structural set: flagged covariates with a treated arm.
pub fn structural_rct_rows(data: &Dataset) -> Result<Vec<usize>> {
    let flags = data.structural.as_ref().ok_or(FusionError::NoStructuralSet)?;
    Ok(data
        .rows_of(Source::Rct)
        .into_iter()
        .filter(|&i| flags[i] && data.t[i] >= 1)
        .collect())
}

/// `min_m |mean_{S} (y - m)|` over a grid of predictions (one vector per model,
/// aligned with the rows of `data`).
pub fn delta_hat_over_grid(data: &Dataset, grid: &[Vec<f64>]) -> Result<f64> {
    let rows = structural_rct_rows(data)?;
    if rows.is_empty() {
        return Err(FusionError::NoStructuralSet);
    }
    if grid.is_empty() {
        return Err(FusionError::Empty("model grid"));
    }
    grid.iter()
        .map(|m| {
            if m.len() != data.len() {
                return Err(FusionError::LengthMismatch {
                    left: m.len(),
                    right: data.len(),
                });
            }
            Ok((rows.iter().map(|&i| data.y[i] - m[i]).sum::<f64>() / rows.len() as f64).abs())
        })
        .try_fold(f64::INFINITY, |acc, v| v.map(|v| acc.min(v)))
}

/// Predictions of `n_models` ridge fits on bootstrap resamples of the
/// observational rows. These models never see the structural set, which is
/// the restricted class the constant refers to.
pub fn observational_model_grid(data: &Dataset, n_models: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let obs = data.require(Source::Obs)?;
    let std = Standardizer::fit(data.x.view());
    let x_all = std.apply(data.x.view())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_models)
        .map(|_| {
            let boot: Vec<usize> = (0..obs.len()).map(|_| obs[rng.random_range(0..obs.len())]).collect();
            let fit = ArmRidge::fit(
                x_all.select(Axis(0), &boot).view(),
                &data.t_rows(&boot),
                &data.y_rows(&boot),
                data.n_arms,
            )?;
            Ok(fit.predict(x_all.view(), &data.t)?.to_vec())
        })
        .collect()
}

/// Explicit lower-bound constant on the raw-space gap. `delta_hat = None`
/// estimates it over a 50-model observational grid.
pub fn explicit_gap_constant(data: &Dataset, delta_hat: Option<f64>) -> Result<GapConstant> {
    let s_rows = structural_rct_rows(data)?;
    let n_rct = data.count(Source::Rct);
    if s_rows.is_empty() || n_rct == 0 {
        return Err(FusionError::NoStructuralSet);
    }
    let p_s = s_rows.len() as f64 / n_rct as f64;
    let strata = data.strata_rows(&s_rows);
    let (mut p_min, mut p_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (j, &i) in s_rows.iter().enumerate() {
        let p = data.probs.row(strata.as_ref().map(|s| s[j]))?[data.t[i]];
        p_min = p_min.min(p);
        p_max = p_max.max(p);
    }
    let delta_hat = match delta_hat {
        Some(d) => d,
        None => delta_hat_over_grid(data, &observational_model_grid(data, 50, 0)?)?,
    };
    Ok(GapConstant {
        c0_hat: gap_constant(p_min, p_max, p_s, delta_hat),
        p_min,
        p_max,
        p_s,
        delta_hat,
    })
}

/// Per-arm ridge regression on a feature matrix.
#[derive(Debug, Clone, PartialEq)]
struct ArmRidge {
    coef: Vec<DVector<f64>>,
}

impl ArmRidge {
    fn fit(x: ArrayView2<'_, f64>, t: &[usize], y: &[f64], n_arms: usize) -> Result<Self> {
        let d = x.ncols();
        let coef = (0..n_arms)
            .map(|a| {
                let rows: Vec<usize> = (0..t.len()).filter(|&i| t[i] == a).collect();
                let design = DMatrix::from_fn(rows.len(), d + 1, |r, c| if c == 0 { 1.0 } else { x[(rows[r], c - 1)] });
                let gram = design.transpose() * &design + DMatrix::identity(d + 1, d + 1) * RIDGE;
                let rhs = design.transpose() * DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[i]));
                gram.cholesky()
                    .map(|c| c.solve(&rhs))
                    .ok_or_else(|| FusionError::InvalidConfig("singular ridge system".into()))
            })
            .collect::<Result<_>>()?;
        Ok(Self { coef })
    }

    fn predict(&self, x: ArrayView2<'_, f64>, t: &[usize]) -> Result<Array1<f64>> {
        t.iter()
            .enumerate()
            .map(|(i, &a)| {
                let c = self.coef.get(a).ok_or(FusionError::InvalidTreatment {
                    t: a,
                    n_arms: self.coef.len(),
                })?;
                Ok(c[0] + x.row(i).iter().zip(c.iter().skip(1)).map(|(u, v)| u * v).sum::<f64>())
            })
            .collect()
    }
}

/// A representation applied to raw covariates.
pub type RepresentationFn<'a> = &'a dyn Fn(ArrayView2<'_, f64>) -> Result<Array2<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoEstimate {
    /// Held-out risk through the representation minus held-out risk on raw covariates.
    pub raw: f64,
    pub clamped: f64,
    pub risk_phi: f64,
    pub risk_x: f64,
}

fn heldout_risk(
    train: &Dataset,
    test: &Dataset,
    f_train: ArrayView2<'_, f64>,
    f_test: ArrayView2<'_, f64>,
) -> Result<f64> {
    let std = Standardizer::fit(f_train);
    let model = ArmRidge::fit(std.apply(f_train)?.view(), &train.t, &train.y, train.n_arms)?;
    let pred = model.predict(std.apply(f_test)?.view(), &test.t)?;
    Ok(pred.iter().zip(&test.y).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / test.len() as f64)
}

/// Excess held-out squared-error risk of the per-arm ridge reference family
/// fitted on `phi(X)` over the same family on `X`, pooled over both sources.
pub fn info_preservation(train: &Dataset, test: &Dataset, phi: RepresentationFn<'_>) -> Result<InfoEstimate> {
    if test.is_empty() {
        return Err(FusionError::Empty("held-out split"));
    }
    let risk_x = heldout_risk(train, test, train.x.view(), test.x.view())?;
    let (p_train, p_test) = (phi(train.x.view())?, phi(test.x.view())?);
    let risk_phi = heldout_risk(train, test, p_train.view(), p_test.view())?;
    let raw = risk_phi - risk_x;
    Ok(InfoEstimate {
        raw,
        clamped: raw.max(0.0),
        risk_phi,
        risk_x,
    })
}

fn strided(rows: &[usize], cap: usize) -> Vec<usize> {
    if rows.len() <= cap {
        return rows.to_vec();
    }
    (0..cap).map(|i| rows[i * rows.len() / cap]).collect()
}

/// Kernel MMD between the sources on `(phi(x), t)`.
pub fn overlap_discrepancy(data: &Dataset, phi: RepresentationFn<'_>) -> Result<f64> {
    let r = strided(&data.require(Source::Rct)?, MMD_ROWS);
    let o = strided(&data.require(Source::Obs)?, MMD_ROWS);
    let fr = append_one_hot(phi(data.x_rows(&r).view())?.view(), &data.t_rows(&r), data.n_arms)?;
    let fo = append_one_hot(phi(data.x_rows(&o).view())?.view(), &data.t_rows(&o), data.n_arms)?;
    Ok(mmd_joint(fr.view(), fo.view(), None)?.value)
}

/// Raw-linear gap after mapping covariates through `phi`.
fn linear_gap_through(fit: &Dataset, eval: &Dataset, phi: RepresentationFn<'_>) -> Result<f64> {
    let (pf, pe) = (phi(fit.x.view())?, phi(eval.x.view())?);
    let std = Standardizer::fit(pf.view());
    let fr = fit.require(Source::Rct)?;
    let er = eval.require(Source::Rct)?;
    let xf = std.apply(pf.select(Axis(0), &fr).view())?;
    let xe = std.apply(pe.select(Axis(0), &er).view())?;
    Ok(linear_gap(fit, eval, xf.view(), xe.view())?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub name: String,
    pub eps_ov: f64,
    pub eps_info: f64,
    pub gap_phi: f64,
    /// `a + b eps_ov + c sqrt(eps_info) - gap_phi` under the fitted coefficients.
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffAudit {
    pub rows: Vec<TradeoffRow>,
    /// Nonnegative `(a, b, c)`.
    pub coef: [f64; 3],
    pub fraction_nonnegative_slack: f64,
}

/// Nonnegative least squares by enumerating active sets; exact for a handful
/// of columns.
pub fn nnls_small(design: &DMatrix<f64>, target: &DVector<f64>) -> Vec<f64> {
    let p = design.ncols();
    let mut best = (f64::INFINITY, vec![0.0; p]);
    for mask in 0u32..(1 << p) {
        let cols: Vec<usize> = (0..p).filter(|j| mask & (1 << j) != 0).collect();
        let mut coef = vec![0.0; p];
        if !cols.is_empty() {
            let sub = DMatrix::from_fn(design.nrows(), cols.len(), |r, c| design[(r, cols[c])]);
            let Ok(pinv) = sub.clone().pseudo_inverse(1e-12) else {
                continue;
            };
            let sol = pinv * target;
            if sol.iter().any(|&v| v < 0.0) {
                continue;
            }
            for (c, &j) in cols.iter().enumerate() {
                coef[j] = sol[c];
            }
        }
        let fitted = design * DVector::from_column_slice(&coef);
        let err = (&fitted - target).norm_squared();
        if err < best.0 {
            best = (err, coef);
        }
    }
    best.1
}

/// Measures overlap discrepancy, information loss and raw-linear gap through
/// each representation and fits `gap <= a + b eps_ov + c sqrt(eps_info)`.
pub fn tradeoff_audit(
    train: &Dataset,
    test: &Dataset,
    phis: &[(String, RepresentationFn<'_>)],
) -> Result<TradeoffAudit> {
    if phis.len() < 2 {
        return Err(FusionError::InvalidConfig(
            "trade-off audit needs at least two representations".into(),
        ));
    }
    let mut rows = Vec::with_capacity(phis.len());
    for (name, phi) in phis {
        let eps_ov = overlap_discrepancy(train, *phi)?;
        let eps_info = info_preservation(train, test, *phi)?.clamped;
        let gap_phi = linear_gap_through(train, test, *phi)?;
        rows.push(TradeoffRow {
            name: name.clone(),
            eps_ov,
            eps_info,
            gap_phi,
            slack: 0.0,
        });
    }
    let design = DMatrix::from_fn(rows.len(), 3, |r, c| match c {
        0 => 1.0,
        1 => rows[r].eps_ov,
        _ => rows[r].eps_info.sqrt(),
    });
    let target = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.gap_phi));
    let coef = nnls_small(&design, &target);
    for r in rows.iter_mut() {
        r.slack = coef[0] + coef[1] * r.eps_ov + coef[2] * r.eps_info.sqrt() - r.gap_phi;
    }
    let ok = rows.iter().filter(|r| r.slack >= -1e-12).count();
    Ok(TradeoffAudit {
        fraction_nonnegative_slack: ok as f64 / rows.len() as f64,
        coef: [coef[0], coef[1], coef[2]],
        rows,
    })
}

/// Everything the audit command reports for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityAudit {
    /// Upper estimates of the infimum of `|g|`.
    pub gap_raw: f64,
    pub gap_raw_net: f64,
    pub gap_phi: f64,
    pub c0_hat: Option<GapConstant>,
    pub eps_ov: Option<f64>,
    pub eps_info: Option<InfoEstimate>,
}

/// Gaps for the three families plus the explicit constant when the structural
/// set is recorded. `phi`, when given, supplies the overlap and information terms.
pub fn audit_feasibility(
    train: &Dataset,
    test: &Dataset,
    cfg: &GapConfig,
    phi: Option<RepresentationFn<'_>>,
) -> Result<FeasibilityAudit> {
    let gap_raw = feasibility_gap(train, test, GapFamily::RawLinear, cfg)?.value;
    let gap_raw_net = feasibility_gap(train, test, GapFamily::RawNet, cfg)?.value;
    let gap_phi = feasibility_gap(train, test, GapFamily::RepNet, cfg)?.value;
    let c0_hat = match explicit_gap_constant(train, None) {
        Ok(c) => Some(c),
        Err(FusionError::NoStructuralSet) => None,
        Err(e) => return Err(e),
    };
    let (eps_ov, eps_info) = match phi {
        Some(phi) => (
            Some(overlap_discrepancy(train, phi)?),
            Some(info_preservation(train, test, phi)?),
        ),
        None => (None, None),
    };
    Ok(FeasibilityAudit {
        gap_raw,
        gap_raw_net,
        gap_phi,
        c0_hat,
        eps_ov,
        eps_info,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::AssignmentProbs;

    fn rct_only(x: Array2<f64>, t: Vec<usize>, y: Vec<f64>) -> Dataset {
        let n = t.len();
        Dataset::new(x, t, y, vec![Source::Rct; n], AssignmentProbs::uniform(2).unwrap()).unwrap()
    }

    #[test]
    fn constant_example() {
        assert!((gap_constant(0.5, 0.5, 0.2, 0.4) - 0.02).abs() < 1e-15);
        assert_eq!(gap_constant(0.5, 0.5, 0.2, 0.0), 0.0);
        assert!((gap_constant(0.3, 0.6, 0.2, 0.8) - 2.0 * gap_constant(0.3, 0.6, 0.2, 0.4)).abs() < 1e-15);
    }

    #[test]
    fn linear_gap_zero_in_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200;
        let x: Array2<f64> = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let t: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)].powi(3) + t[i] as f64).collect();
        let data = rct_only(x, t, y);
        let est = feasibility_gap(&data, &data, GapFamily::RawLinear, &GapConfig::default()).unwrap();
        assert!(est.value < 1e-12, "{}", est.value);
    }

    #[test]
    fn net_gap_small_in_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100;
        let x = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let t: Vec<usize> = (0..n).map(|i| (i / 3) % 2).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let data = rct_only(x, t, y);
        let cfg = GapConfig {
            restarts: 2,
            ..GapConfig::default()
        };
        for fam in [GapFamily::RawNet, GapFamily::RepNet] {
            let est = feasibility_gap(&data, &data, fam, &cfg).unwrap();
            assert!(est.value <= 1e-3, "{fam:?} {}", est.value);
            assert_eq!(est.per_restart.len(), 2);
        }
    }

    #[test]
    fn structural_set_required() {
        let data = rct_only(Array2::zeros((4, 1)), vec![0, 1, 0, 1], vec![0.0; 4]);
        assert!(matches!(
            explicit_gap_constant(&data, Some(0.1)),
            Err(FusionError::NoStructuralSet)
        ));
    }

    #[test]
    fn empty_structural_set_rejected() {
        let mut data = rct_only(Array2::zeros((4, 1)), vec![0, 1, 0, 1], vec![0.0; 4]);
        data.structural = Some(vec![false; 4]);
        assert!(matches!(
            explicit_gap_constant(&data, Some(0.1)),
            Err(FusionError::NoStructuralSet)
        ));
    }

    #[test]
    fn constant_from_flags() {
        let mut data = rct_only(
            Array2::zeros((10, 1)),
            vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1],
            vec![1.0; 10],
        );
        data.structural = Some(vec![true, true, false, true, false, false, false, false, false, false]);
        let c = explicit_gap_constant(&data, Some(0.4)).unwrap();
        assert!((c.p_s - 0.2).abs() < 1e-15);
        assert!((c.c0_hat - 0.02).abs() < 1e-15);
        let d = delta_hat_over_grid(&data, &[vec![0.0; 10], vec![0.75; 10]]).unwrap();
        assert!((d - 0.25).abs() < 1e-15);
    }

    #[test]
    fn nnls_recovers_nonnegative_fit() {
        let design = DMatrix::from_row_slice(4, 3, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let target = DVector::from_vec(vec![0.5, 1.5, 0.5, 1.5]);
        let c = nnls_small(&design, &target);
        assert!((c[0] - 0.5).abs() < 1e-12 && (c[1] - 1.0).abs() < 1e-12 && c[2].abs() < 1e-12);
        let neg = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
        assert!(nnls_small(&design, &neg).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn identity_loses_no_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 300;
        let x: Array2<f64> = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let t: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 2.0 * x[(i, 0)] + t[i] as f64 + rng.random_range(-0.1..0.1))
            .collect();
        let data = rct_only(x, t, y);
        let (train, test) = data.split_holdout(0.3, 1).unwrap();
        let ident = |x: ArrayView2<'_, f64>| -> Result<Array2<f64>> { Ok(x.to_owned()) };
        let konst = |x: ArrayView2<'_, f64>| -> Result<Array2<f64>> { Ok(Array2::zeros((x.nrows(), 1))) };
        let a = info_preservation(&train, &test, &ident).unwrap();
        let b = info_preservation(&train, &test, &konst).unwrap();
        assert!(a.raw.abs() < 1e-12);
        assert!(b.raw > 0.5);
    }
}
