use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datagen::{gen_synthetic, spd_condition, LqToy, Source, SyntheticConfig};
use crate::diffmodels::{Activation, RepresentationNet};
use crate::discrepancy::marginal_treatment_tv;
use crate::error::{FusionError, Result};
use crate::estimators::{lq_alpha_sweep, lq_penalty_residual, lq_primal_dual, solve_minimax_toy, LqPdConfig};
use crate::moments::{baseline_invariance_check, decompose_moment, moment_residual, psi, AssignmentProbs};

/// Check names in execution order.
pub const CHECKS: [&str; 9] = [
    "baseline-invariance",
    "moment-at-truth",
    "moment-decomposition",
    "pd-feasibility",
    "penalty-conditioning",
    "weighted-path",
    "tradeoff-exclusion",
    "irreducible-overlap",
    "minimax-toy",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryOptions {
    pub seed: u64,
    /// Imbalance of the two-cell construction.
    pub epsilon: f64,
    pub n_toys: usize,
    pub toy_dim: usize,
    pub toy_constraints: usize,
    pub invariance_n: usize,
}

impl Default for TheoryOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            epsilon: 0.2,
            n_toys: 20,
            toy_dim: 10,
            toy_constraints: 3,
            invariance_n: 100_000,
        }
    }
}

/// Outcome of one named check with the measured quantities behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    /// Soft checks are reported but never fail the suite.
    pub hard: bool,
    pub passed: bool,
    pub measured: serde_json::Value,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub options: TheoryOptions,
    pub verdicts: Vec<Verdict>,
}

impl TheoryReport {
    pub fn hard_checks_passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed || !v.hard)
    }
}

fn verdict(name: &str, passed: bool, measured: serde_json::Value) -> Verdict {
    Verdict {
        name: name.to_string(),
        hard: true,
        passed,
        measured,
        note: None,
    }
}

/// Runs the named checks (all when `only` is empty) in [`CHECKS`] order.
pub fn run_theory_suite(only: &[String], opts: &TheoryOptions) -> Result<TheoryReport> {
    if let Some(bad) = only.iter().find(|n| !CHECKS.contains(&n.as_str())) {
        return Err(FusionError::InvalidConfig(format!(
            "unknown check `{bad}`; known: {}",
            CHECKS.join(", ")
        )));
    }
    let verdicts = CHECKS
        .iter()
        .filter(|c| only.is_empty() || only.iter().any(|o| o == *c))
        .map(|&name| {
            log::info!("theory check {name}");
            run_check(name, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TheoryReport {
        options: opts.clone(),
        verdicts,
    })
}

fn run_check(name: &str, o: &TheoryOptions) -> Result<Verdict> {
    match name {
        "baseline-invariance" => baseline_invariance(o),
        "moment-at-truth" => moment_at_truth(o),
        "moment-decomposition" => moment_decomposition(o),
        "pd-feasibility" => pd_feasibility(o),
        "penalty-conditioning" => penalty_conditioning(o),
        "weighted-path" => weighted_path(o),
        "tradeoff-exclusion" => tradeoff_exclusion(o),
        "irreducible-overlap" => irreducible_overlap(o),
        "minimax-toy" => minimax(o),
        _ => unreachable!("names validated against CHECKS"),
    }
}

fn toys(o: &TheoryOptions) -> Result<Vec<LqToy>> {
    (0..o.n_toys as u64)
        .map(|i| LqToy::random(o.toy_dim, o.toy_constraints, o.seed.wrapping_add(i + 1)))
        .collect()
}

fn max_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

fn min_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(f64::INFINITY, f64::min)
}

/// Three arms with unequal known probabilities, covariates independent of
/// the assignment, and smooth random functions `u`.
fn baseline_invariance(o: &TheoryOptions) -> Result<Verdict> {
    let n = o.invariance_n;
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed ^ 0xba5e);
    let probs = AssignmentProbs::marginal(vec![0.2, 0.3, 0.5])?;
    let dim = 5;
    let x = Array2::from_shape_fn((n, dim), |_| rng.sample::<f64, _>(StandardNormal));
    let t: Vec<usize> = (0..n)
        .map(|_| {
            let r: f64 = rng.random();
            if r < 0.2 {
                0
            } else if r < 0.5 {
                1
            } else {
                2
            }
        })
        .collect();
    let mut z_max: f64 = 0.0;
    let mut per_u = Vec::new();
    let mut violation = false;
    for _ in 0..10 {
        let w: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let (a, b, c): (f64, f64, f64) = (
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-5.0..5.0),
        );
        let u: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| a * r.dot(&ndarray::ArrayView1::from(&w)).tanh() + b * r[0] * r[0] + c)
            .collect();
        let scores = baseline_invariance_check(&t, &u, &probs, None)?;
        let zs: Vec<f64> = scores.iter().map(|s| s.z).collect();
        violation |= scores.iter().any(|s| s.violation);
        z_max = z_max.max(max_of(zs.iter().map(|z| z.abs())));
        per_u.push(zs);
    }
    Ok(verdict(
        "baseline-invariance",
        z_max <= 4.0 && !violation,
        json!({ "n": n, "n_functions": 10, "max_abs_z": z_max, "z": per_u, "bound": 4.0 }),
    ))
}

/// Randomized rows of the 50,000-row generator with the outcome mean known
/// from every generative input.
fn appendix_rct(o: &TheoryOptions) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>, Vec<usize>, Vec<f64>)> {
    let ds = gen_synthetic(&SyntheticConfig::appendix_f(o.seed.wrapping_add(1)))?;
    let rct = ds.rows_of(Source::Rct);
    let mu0 = ds.mu0.as_ref().ok_or(FusionError::NotSynthetic)?;
    let tau = ds.tau_true.as_ref().ok_or(FusionError::NotSynthetic)?;
    let t = ds.t_rows(&rct);
    Ok((
        rct.clone(),
        ds.y_rows(&rct),
        rct.iter().map(|&i| mu0[i]).collect(),
        t,
        rct.iter().map(|&i| tau[i]).collect(),
    ))
}

fn moment_at_truth(o: &TheoryOptions) -> Result<Verdict> {
    let (rct, y, mu0, t, tau) = appendix_rct(o)?;
    let n = rct.len();
    let probs = AssignmentProbs::marginal(vec![0.5, 0.5])?;
    let m: Vec<f64> = (0..n).map(|i| mu0[i] + t[i] as f64 * tau[i]).collect();
    let g = moment_residual(&y, &t, &m, &probs, None)?;
    let psis: Vec<f64> = (0..n)
        .map(|i| psi(y[i], t[i], m[i], &[0.5, 0.5]).map(|v| v[0]))
        .collect::<Result<_>>()?;
    let mean = psis.iter().sum::<f64>() / n as f64;
    let sd = (psis.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let bound = 4.0 * sd / (n as f64).sqrt();
    let norm = g.norm();
    Ok(verdict(
        "moment-at-truth",
        norm <= bound,
        json!({ "n_rct": n, "g_norm": norm, "psi_sd": sd, "bound": bound }),
    ))
}

fn moment_decomposition(o: &TheoryOptions) -> Result<Verdict> {
    let (rct, y, mu0, t, tau) = appendix_rct(o)?;
    let n = rct.len();
    let probs = AssignmentProbs::marginal(vec![0.5, 0.5])?;
    // observed outcome minus the realized effect recovers Y(0)
    let potential = Array2::from_shape_fn((n, 2), |(i, a)| y[i] - t[i] as f64 * tau[i] + a as f64 * tau[i]);
    // a deliberately misspecified model so that both parts are nonzero
    let heads = Array2::from_shape_fn((n, 2), |(i, a)| 0.5 * mu0[i] + 0.3 + a as f64 * 0.8 * tau[i]);
    let d = decompose_moment(potential.view(), &t, heads.view(), &probs, None)?;
    let m: Vec<f64> = (0..n).map(|i| heads[(i, t[i])]).collect();
    let g = moment_residual(&y, &t, &m, &probs, None)?;
    let err_sum = max_of((0..d.direct.len()).map(|k| (d.direct[k] - d.baseline[k] - d.causal[k]).abs()));
    let err_direct = max_of((0..d.direct.len()).map(|k| (d.direct[k] - g.g[k]).abs()));
    Ok(verdict(
        "moment-decomposition",
        err_sum <= 1e-12 && err_direct <= 1e-12,
        json!({
            "n_rct": n,
            "direct": d.direct,
            "baseline": d.baseline,
            "causal": d.causal,
            "max_abs_sum_error": err_sum,
            "max_abs_error_vs_residual": err_direct,
            "tolerance": 1e-12,
        }),
    ))
}

fn pd_feasibility(o: &TheoryOptions) -> Result<Verdict> {
    let cfg = LqPdConfig::default();
    let mut rows = Vec::new();
    let mut ok = true;
    for (i, toy) in toys(o)?.iter().enumerate() {
        let run = lq_primal_dual(toy, &cfg)?;
        let lhs = cfg.lambda_dual * run.final_g_norm;
        let bound_ok = lhs <= 1.1 * run.eps_opt;
        let rate_ok = run.tail_r2 > 0.95;
        ok &= bound_ok && rate_ok;
        let nu = run.nu.norm();
        rows.push(json!({
            "toy": i,
            "lambda_g": lhs,
            "eps_opt": run.eps_opt,
            "ratio": lhs / run.eps_opt,
            "lambda_star_norm": toy.lambda_star.norm(),
            "final_multiplier_norm": nu,
            "corrected_ok": (cfg.lambda_dual - nu) * run.final_g_norm <= run.eps_opt,
            "tail_slope": run.tail_slope,
            "tail_r2": run.tail_r2,
            "bound_ok": bound_ok,
            "rate_ok": rate_ok,
        }));
    }
    let mut v = verdict(
        "pd-feasibility",
        ok,
        json!({ "lambda_dual": cfg.lambda_dual, "toys": rows }),
    );
    v.note = Some(
        "the saddle gap dominates (Lambda - |lambda_hat|) |g|, not Lambda |g|; near convergence the \
         ratio Lambda |g| / eps_opt approaches Lambda / (Lambda - |lambda*|), which exceeds 1.1 whenever \
         |lambda*| > Lambda / 11"
            .into(),
    );
    Ok(v)
}

/// Least-squares line `y = a + b x` with its coefficient of determination.
fn affine_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    (intercept, slope, if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 })
}

fn penalty_conditioning(o: &TheoryOptions) -> Result<Verdict> {
    let rhos = [1.0, 10.0, 100.0, 1000.0];
    let penalty_grid: Vec<f64> = (0..=8).map(|e| 10f64.powi(e)).collect();
    let mut rows = Vec::new();
    let mut ok = true;
    for (i, toy) in toys(o)?.iter().enumerate() {
        let kappa: Vec<f64> = rhos.iter().map(|&r| spd_condition(&toy.penalty_hessian(r))).collect();
        let (intercept, slope, r2) = affine_fit(&rhos, &kappa);
        let pd = lq_primal_dual(toy, &LqPdConfig::default())?;
        let penalty_at_1 = lq_penalty_residual(toy, 1.0);
        let rho_needed = penalty_grid
            .iter()
            .copied()
            .find(|&r| lq_penalty_residual(toy, r) <= 1e-3);
        let cond_ok = slope > 0.0 && r2 > 0.99;
        let dual_ok = pd.final_g_norm <= 1e-3 && penalty_at_1 > 1e-3;
        ok &= cond_ok && dual_ok;
        rows.push(json!({
            "toy": i,
            "kappa": kappa,
            "intercept": intercept,
            "slope": slope,
            "r2": r2,
            "pd_g_at_rho_1": pd.final_g_norm,
            "penalty_g_at_rho_1": penalty_at_1,
            "penalty_rho_needed": rho_needed,
            "conditioning_ok": cond_ok,
            "dual_vs_penalty_ok": dual_ok,
        }));
    }
    let slopes: Vec<f64> = rows.iter().map(|r| r["slope"].as_f64().unwrap_or(f64::NAN)).collect();
    let r2s: Vec<f64> = rows.iter().map(|r| r["r2"].as_f64().unwrap_or(f64::NAN)).collect();
    Ok(verdict(
        "penalty-conditioning",
        ok,
        json!({
            "rhos": rhos,
            "min_slope": min_of(slopes),
            "min_r2": min_of(r2s),
            "g_target": 1e-3,
            "toys": rows,
        }),
    ))
}

fn alpha_grid(hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| hi * i as f64 / n as f64).collect()
}

fn weighted_path(o: &TheoryOptions) -> Result<Verdict> {
    let tol = 1e-8;
    let grid = alpha_grid(1.0, 100);
    let mut rows = Vec::new();
    let mut ok = true;
    for (i, toy) in toys(o)?.iter().enumerate() {
        let (c, sweep) = lq_alpha_sweep(toy, &grid)?;
        let path_slack = min_of(sweep.iter().map(|r| r.path_bound - r.path_dist));
        let g_slack = min_of(sweep.iter().map(|r| r.g_norm - r.g_lower));
        let this = path_slack >= -tol && g_slack >= -tol;
        ok &= this;
        rows.push(json!({
            "toy": i,
            "m_r": c.m_r,
            "mu": c.mu,
            "l_g": c.l_g,
            "min_path_slack": path_slack,
            "min_g_slack": g_slack,
            "ok": this,
        }));
    }
    Ok(verdict(
        "weighted-path",
        ok,
        json!({ "tolerance": tol, "grid_points": grid.len(), "toys": rows }),
    ))
}

fn tradeoff_exclusion(o: &TheoryOptions) -> Result<Verdict> {
    let mut rows = Vec::new();
    let mut ok = true;
    let mut audited = 0;
    for (i, toy) in toys(o)?.iter().enumerate() {
        let (c, _) = lq_alpha_sweep(toy, &[0.0])?;
        if !(c.delta_o > 0.0) {
            rows.push(json!({ "toy": i, "delta_o": c.delta_o, "skipped": true }));
            continue;
        }
        audited += 1;
        let (c, sweep) = lq_alpha_sweep(toy, &alpha_grid(c.alpha_bar, 200))?;
        let hits = sweep.iter().filter(|r| r.excluded_region_hit).count();
        let this = hits == 0 && c.c0 > 0.0;
        ok &= this;
        rows.push(json!({
            "toy": i,
            "delta_o": c.delta_o,
            "alpha_bar": c.alpha_bar,
            "c0": c.c0,
            "eps0": c.eps0,
            "hits": hits,
            "ok": this,
        }));
    }
    Ok(verdict(
        "tradeoff-exclusion",
        ok && audited > 0,
        json!({ "audited": audited, "toys": rows }),
    ))
}

/// Observational rows all receive the control arm; no representation of `X`
/// can recover the missing treated mass.
fn irreducible_overlap(o: &TheoryOptions) -> Result<Verdict> {
    let mut ds = gen_synthetic(&SyntheticConfig::section4(0.0, o.seed.wrapping_add(1)))?;
    let obs = ds.rows_of(Source::Obs);
    for &i in &obs {
        ds.t[i] = 0;
    }
    let rct = ds.rows_of(Source::Rct);
    let t_r = ds.t_rows(&rct);
    let p_treated = t_r.iter().filter(|&&a| a == 1).count() as f64 / t_r.len() as f64;
    let t_o = ds.t_rows(&obs);
    let mut gaps = Vec::new();
    let mut joint = Vec::new();
    for j in 0..5u64 {
        let phi = RepresentationNet::<f64>::new(ds.dim(), &[32], 8, Activation::Tanh, o.seed.wrapping_add(100 + j))?;
        let zr = phi.forward(ds.x_rows(&rct).view())?;
        let zo = phi.forward(ds.x_rows(&obs).view())?;
        // treatment marginal of the mapped pairs (phi(x), t)
        gaps.push(marginal_treatment_tv(&t_r, &t_o, ds.n_arms)?.per_arm_gap[1]);
        joint.push(binned_joint_tv(zr.view(), &t_r, zo.view(), &t_o, ds.n_arms));
    }
    let exact = gaps.iter().all(|&g| g == p_treated);
    let dominated = joint.iter().all(|&tv| tv >= p_treated - 1e-12);
    Ok(verdict(
        "irreducible-overlap",
        exact && dominated,
        json!({
            "p_rct_treated": p_treated,
            "arm_gap_per_representation": gaps,
            "binned_joint_tv_per_representation": joint,
        }),
    ))
}

/// TV between the two laws of `(sign pattern of z[0..2], t)`, a coarsening
/// of the joint law and so a lower bound on its TV.
fn binned_joint_tv(
    zr: ndarray::ArrayView2<'_, f64>,
    tr: &[usize],
    zo: ndarray::ArrayView2<'_, f64>,
    to: &[usize],
    n_arms: usize,
) -> f64 {
    let hist = |z: ndarray::ArrayView2<'_, f64>, t: &[usize]| {
        let mut h = vec![0.0; 4 * n_arms];
        for (row, &a) in z.rows().into_iter().zip(t) {
            let bin = usize::from(row[0] > 0.0) + 2 * usize::from(row[1] > 0.0);
            h[bin * n_arms + a] += 1.0 / t.len() as f64;
        }
        h
    };
    let (hr, ho) = (hist(zr, tr), hist(zo, to));
    0.5 * hr.iter().zip(&ho).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn minimax(o: &TheoryOptions) -> Result<Verdict> {
    let grid: Vec<f64> = (0..=2000).map(|i| -1.0 + i as f64 * 1e-3).collect();
    let s = solve_minimax_toy(o.epsilon, &grid)?;
    let expected_root = 2.0 * o.epsilon;
    let passed = if expected_root <= 1.0 {
        s.inf_abs_g <= 5e-4 && (s.argmin_alpha - expected_root).abs() <= 2e-3
    } else {
        s.inf_abs_g > 0.0
    };
    Ok(Verdict {
        name: "minimax-toy".into(),
        hard: false,
        passed,
        measured: json!({
            "epsilon": o.epsilon,
            "inf_abs_g": s.inf_abs_g,
            "argmin_alpha": s.argmin_alpha,
            "abs_g_at_alpha_0": s.abs_g_at_zero,
            "grid_step": 1e-3,
        }),
        note: Some(format!(
            "measured inf |g| ≈ {:.1e}; theorem claims ≥ cε; discrepancy documented: the treated prediction \
             alpha = 2ε zeroes the randomized moment, so no positive floor holds over unrestricted constants",
            s.inf_abs_g
        )),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_fit_exact_line() {
        let (a, b, r2) = affine_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_check_rejected() {
        assert!(run_theory_suite(&["nope".into()], &TheoryOptions::default()).is_err());
    }

    #[test]
    fn minimax_is_soft() {
        let r = run_theory_suite(&["minimax-toy".into()], &TheoryOptions::default()).unwrap();
        assert_eq!(r.verdicts.len(), 1);
        assert!(!r.verdicts[0].hard && r.verdicts[0].passed);
        assert!(r.hard_checks_passed());
    }
}
