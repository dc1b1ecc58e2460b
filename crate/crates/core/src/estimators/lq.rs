//! Deterministic solvers on linear-quadratic instances, where every optimum
//! and multiplier is available in closed form.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::datagen::LqToy;
use crate::error::{FusionError, Result};

/// Iterates below this residual are dominated by rounding and are left out of
/// the tail fit.
const RESIDUAL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqPdConfig {
    pub rho: f64,
    /// Dual ball radius.
    pub lambda_dual: f64,
    /// `None` uses `1 / (L + rho |A|^2)`.
    pub eta_primal: Option<f64>,
    /// Zero freezes the multiplier, turning the loop into the penalty method.
    pub eta_dual: f64,
    pub iters: usize,
    /// Fraction of the pre-floor trajectory used by the log-linear fit.
    pub tail_frac: f64,
}

impl Default for LqPdConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            lambda_dual: 50.0,
            eta_primal: None,
            eta_dual: 0.1,
            iters: 4000,
            tail_frac: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqRun {
    pub theta: DVector<f64>,
    pub nu: DVector<f64>,
    /// `|g(theta_s)|` after every primal step.
    pub g_history: Vec<f64>,
    pub final_g_norm: f64,
    pub eps_opt: f64,
    pub tail_slope: f64,
    pub tail_r2: f64,
}

/// `max_{|l|<=Lambda} L(theta, l) - min_theta' L(theta', lambda)` for the plain
/// Lagrangian `R_o + l'g`, evaluated as
/// `(Lambda |g| - lambda'g) + 1/2 grad' H^-1 grad` with `grad = grad_theta L(theta, lambda)`,
/// which avoids cancelling two O(1) Lagrangian values near a saddle point.
pub fn saddle_gap(toy: &LqToy, theta: &DVector<f64>, lambda: &DVector<f64>, radius: f64) -> f64 {
    let g = toy.residual(theta);
    let grad = toy.risk_grad(theta) + toy.a.transpose() * lambda;
    let step = toy.h.clone().cholesky().expect("H is positive definite").solve(&grad);
    (radius * g.norm() - lambda.dot(&g)) + 0.5 * grad.dot(&step)
}

/// Least-squares fit of `ln v_s` on `s` over the tail of the trajectory that
/// precedes the rounding floor. Returns `(slope, R^2)`.
pub fn tail_log_linear_fit(values: &[f64], tail_frac: f64) -> (f64, f64) {
    let end = values
        .iter()
        .position(|&v| !(v > RESIDUAL_FLOOR))
        .unwrap_or(values.len());
    let len = ((end as f64) * tail_frac.clamp(0.0, 1.0)).round() as usize;
    if len < 3 {
        return (f64::NAN, f64::NAN);
    }
    let start = end - len;
    let xs: Vec<f64> = (start..end).map(|s| s as f64).collect();
    let ys: Vec<f64> = values[start..end].iter().map(|v| v.ln()).collect();
    let n = len as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, r2)
}

/// Full-gradient primal-dual iterations on `R_o + nu'g + rho/2 |g|^2` with
/// projected dual ascent evaluated at the updated primal point.
pub fn lq_primal_dual(toy: &LqToy, cfg: &LqPdConfig) -> Result<LqRun> {
    if !(cfg.rho >= 0.0 && cfg.lambda_dual >= 0.0 && cfg.eta_dual >= 0.0) || cfg.iters == 0 {
        return Err(FusionError::InvalidConfig(format!(
            "invalid LQ primal-dual config {cfg:?}"
        )));
    }
    let a_norm = toy.l_g();
    let eta = cfg
        .eta_primal
        .unwrap_or(1.0 / (toy.smoothness() + cfg.rho * a_norm * a_norm));
    if !(eta > 0.0) {
        return Err(FusionError::InvalidConfig(format!(
            "primal step must be positive, got {eta}"
        )));
    }
    let at = toy.a.transpose();
    let mut theta = DVector::zeros(toy.dim());
    let mut nu = DVector::zeros(toy.n_constraints());
    let mut g_history = Vec::with_capacity(cfg.iters);
    for step in 0..cfg.iters {
        let g = toy.residual(&theta);
        let grad = toy.risk_grad(&theta) + &at * (&nu + &g * cfg.rho);
        theta -= grad * eta;
        let g_new = toy.residual(&theta);
        let gn = g_new.norm();
        if !gn.is_finite() {
            return Err(FusionError::InvalidConfig(format!(
                "LQ primal-dual diverged at step {step}"
            )));
        }
        g_history.push(gn);
        if cfg.eta_dual > 0.0 {
            nu += g_new * cfg.eta_dual;
            let n = nu.norm();
            if n > cfg.lambda_dual {
                nu *= cfg.lambda_dual / n;
            }
        }
    }
    let final_g_norm = *g_history.last().expect("iters >= 1");
    let (tail_slope, tail_r2) = tail_log_linear_fit(&g_history, cfg.tail_frac);
    Ok(LqRun {
        eps_opt: saddle_gap(toy, &theta, &nu, cfg.lambda_dual),
        theta,
        nu,
        g_history,
        final_g_norm,
        tail_slope,
        tail_r2,
    })
}

/// `|g|` at the exact minimizer of the quadratic penalty with the multiplier at zero.
pub fn lq_penalty_residual(toy: &LqToy, rho: f64) -> f64 {
    let nu = DVector::zeros(toy.n_constraints());
    toy.residual(&toy.penalty_minimizer(rho, &nu)).norm()
}

/// Instance constants entering the weighted-path bounds. The model class is
/// the ball of radius `radius`, which provably contains the whole weighted path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathConstants {
    pub radius: f64,
    /// Strong convexity of `R_o`.
    pub mu: f64,
    /// `|A|_op`.
    pub l_g: f64,
    /// Sup of `|grad R_r|` over the ball.
    pub m_r: f64,
    /// Constrained optimum of `R_o`.
    pub r_o_star: f64,
    /// `R_o* - min R_o`.
    pub delta_o: f64,
    /// Upper bound on the range of `R_r` over the ball.
    pub b_r: f64,
    pub alpha_bar: f64,
    /// Infimum of `|g(theta_alpha)|` over the grid points in `[0, alpha_bar]`.
    pub c0: f64,
    /// `(mu_o / L_o^2) c0^2` with quadratic-growth modulus `mu_o = mu / 2`.
    pub eps0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqAlphaRow {
    pub alpha: f64,
    pub r_o: f64,
    pub r_r: f64,
    pub g_norm: f64,
    /// `|theta_alpha - theta_0|`.
    pub path_dist: f64,
    /// `(M_r / mu) alpha`.
    pub path_bound: f64,
    /// `|g(theta_0)| - (L_g M_r / mu) alpha`.
    pub g_lower: f64,
    /// Inside `{R_o < R_o* + eps0, |g| < c0}` with `alpha <= alpha_bar`.
    pub excluded_region_hit: bool,
}

/// Exact weighted minimizers along `alphas` with the path constants of the instance.
pub fn lq_alpha_sweep(toy: &LqToy, alphas: &[f64]) -> Result<(PathConstants, Vec<LqAlphaRow>)> {
    if alphas.first() != Some(&0.0) || alphas.windows(2).any(|p| p[0] > p[1]) {
        return Err(FusionError::InvalidConfig(
            "alpha grid must be ascending and start at 0".into(),
        ));
    }
    let theta_0 = toy.unconstrained_minimizer();
    let theta_r = toy.randomized_minimizer();
    let hr_eig = toy.h_r.symmetric_eigenvalues();
    let (hr_min, hr_max) = (hr_eig.min(), hr_eig.max());
    // |theta_alpha - theta_0| <= |grad R_r(theta_0)| / lambda_min(H_r) for every alpha
    let radius = theta_0.norm() + toy.risk_r_grad(&theta_0).norm() / hr_min;
    let mu = toy.mu();
    let l_g = toy.l_g();
    let m_r = hr_max * radius + toy.b_r.norm();
    let r_o_star = toy.risk_star();
    let delta_o = r_o_star - toy.risk(&theta_0);
    let b_r = 0.5 * hr_max * radius * radius + toy.b_r.norm() * radius - toy.risk_r(&theta_r);
    let alpha_bar = delta_o / (2.0 * b_r);

    let path: Vec<(f64, DVector<f64>)> = alphas.iter().map(|&a| (a, toy.weighted_minimizer(a))).collect();
    let c0 = path
        .iter()
        .filter(|(a, _)| *a <= alpha_bar)
        .map(|(_, th)| toy.residual(th).norm())
        .fold(f64::INFINITY, f64::min);
    let eps0 = 0.5 * mu / (l_g * l_g) * c0 * c0;
    let g0 = toy.residual(&theta_0).norm();
    let rows = path
        .into_iter()
        .map(|(alpha, th)| {
            let g_norm = toy.residual(&th).norm();
            let r_o = toy.risk(&th);
            LqAlphaRow {
                alpha,
                r_o,
                r_r: toy.risk_r(&th),
                g_norm,
                path_dist: (&th - &theta_0).norm(),
                path_bound: m_r / mu * alpha,
                g_lower: g0 - l_g * m_r / mu * alpha,
                excluded_region_hit: alpha <= alpha_bar && r_o < r_o_star + eps0 && g_norm < c0,
            }
        })
        .collect();
    Ok((
        PathConstants {
            radius,
            mu,
            l_g,
            m_r,
            r_o_star,
            delta_o,
            b_r,
            alpha_bar,
            c0,
            eps0,
        },
        rows,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn saddle_gap_vanishes_at_kkt_point() {
        let toy = LqToy::random(6, 2, 1).unwrap();
        let gap = saddle_gap(&toy, &toy.theta_star, &toy.lambda_star, 50.0);
        assert!(gap.abs() < 1e-10, "{gap}");
    }

    #[test]
    fn saddle_gap_matches_direct_difference() {
        let toy = LqToy::random(6, 2, 3).unwrap();
        let theta = DVector::from_fn(6, |i, _| 0.3 * i as f64 - 0.5);
        let lambda = DVector::from_vec(vec![0.7, -1.2]);
        let inner = toy
            .h
            .clone()
            .cholesky()
            .unwrap()
            .solve(&(-(&toy.b + toy.a.transpose() * &lambda)));
        let direct = toy.risk(&theta) + 50.0 * toy.residual(&theta).norm() - toy.lagrangian(&inner, &lambda);
        assert!((saddle_gap(&toy, &theta, &lambda, 50.0) - direct).abs() < 1e-10 * direct.abs().max(1.0));
    }

    #[test]
    fn saddle_gap_bounds_residual() {
        let toy = LqToy::random(6, 2, 2).unwrap();
        let theta = &toy.theta_star + DVector::from_element(6, 0.1);
        let gap = saddle_gap(&toy, &theta, &toy.lambda_star, 50.0);
        assert!(gap >= (50.0 - toy.lambda_star.norm()) * toy.residual(&theta).norm() - 1e-12);
    }

    #[test]
    fn tail_fit_of_geometric_sequence() {
        let v: Vec<f64> = (0..200).map(|s| 3.0 * 0.9f64.powi(s)).collect();
        let (slope, r2) = tail_log_linear_fit(&v, 0.5);
        assert!((slope - 0.9f64.ln()).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tail_fit_stops_at_floor() {
        let mut v: Vec<f64> = (0..100).map(|s| 0.5f64.powi(s)).collect();
        v.extend(std::iter::repeat_n(1e-16, 100));
        let (_, r2) = tail_log_linear_fit(&v, 0.5);
        assert!(r2 > 0.999);
    }

    #[test]
    fn primal_dual_reaches_kkt_point() {
        let toy = LqToy::random(8, 2, 3).unwrap();
        let run = lq_primal_dual(&toy, &LqPdConfig::default()).unwrap();
        assert!((&run.theta - &toy.theta_star).norm() < 1e-6);
        assert!(run.final_g_norm < 1e-6);
    }

    #[test]
    fn frozen_dual_converges_to_penalty_minimizer() {
        let toy = LqToy::random(8, 2, 4).unwrap();
        let cfg = LqPdConfig {
            eta_dual: 0.0,
            rho: 10.0,
            iters: 20_000,
            ..LqPdConfig::default()
        };
        let run = lq_primal_dual(&toy, &cfg).unwrap();
        assert!((run.final_g_norm - lq_penalty_residual(&toy, 10.0)).abs() < 1e-8);
    }

    #[test]
    fn penalty_residual_decays_like_inverse_rho() {
        let toy = LqToy::random(8, 2, 5).unwrap();
        let r1 = lq_penalty_residual(&toy, 1e3);
        let r2 = lq_penalty_residual(&toy, 1e4);
        assert!((r1 / r2 - 10.0).abs() < 0.1);
    }

    #[test]
    fn path_constants_on_identity_instance() {
        let n = 2;
        let mut a = DMatrix::zeros(1, n);
        a[(0, 0)] = 1.0;
        let b = DVector::from_vec(vec![-1.0, 0.0]);
        let toy = LqToy::from_parts(
            DMatrix::identity(n, n),
            b,
            a,
            DVector::zeros(1),
            DMatrix::identity(n, n),
            DVector::zeros(n),
        )
        .unwrap();
        let (pc, rows) = lq_alpha_sweep(&toy, &[0.0, 1.0]).unwrap();
        // theta_0 = e1, theta_r = 0, theta_alpha = e1 / (1 + alpha)
        assert!((pc.radius - 2.0).abs() < 1e-15);
        assert!((pc.delta_o - 0.5).abs() < 1e-15);
        assert!((rows[1].path_dist - 0.5).abs() < 1e-15);
        assert!((rows[1].g_norm - 0.5).abs() < 1e-15);
    }

    #[test]
    fn grid_must_start_at_zero() {
        let toy = LqToy::random(4, 1, 0).unwrap();
        assert!(lq_alpha_sweep(&toy, &[0.1, 0.2]).is_err());
    }
}
