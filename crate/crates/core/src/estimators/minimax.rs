use serde::{Deserialize, Serialize};

use crate::datagen::{MinimaxCell, MinimaxToy};
use crate::error::{FusionError, Result};

/// Population moment of the treated arm for the constant treated prediction
/// `alpha`: `sum_z P(z, 1) (E[Y | z, 1] - alpha)`.
pub fn minimax_residual(law: &[f64; 4], alpha: f64) -> f64 {
    MinimaxCell::ALL
        .iter()
        .zip(law)
        .filter(|(cell, _)| cell.t == 1)
        .map(|(cell, p)| p * (cell.outcome_mean() - alpha))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimaxSolution {
    pub epsilon: f64,
    pub inf_abs_g: f64,
    pub argmin_alpha: f64,
    /// `|g|` at `alpha = 0`, where the claimed `c * epsilon` floor would bind.
    pub abs_g_at_zero: f64,
}

/// Grid infimum of `|g(alpha)|` under the imbalanced randomized law.
pub fn solve_minimax_toy(epsilon: f64, alpha_grid: &[f64]) -> Result<MinimaxSolution> {
    let law = MinimaxToy::laws(epsilon).2;
    let (argmin_alpha, inf_abs_g) = alpha_grid
        .iter()
        .map(|&a| (a, minimax_residual(&law, a).abs()))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .ok_or(FusionError::Empty("alpha grid"))?;
    Ok(MinimaxSolution {
        epsilon,
        inf_abs_g,
        argmin_alpha,
        abs_g_at_zero: minimax_residual(&law, 0.0).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(step: f64) -> Vec<f64> {
        let n = (2.0 / step).round() as usize;
        (0..=n).map(|i| -1.0 + i as f64 * step).collect()
    }

    #[test]
    fn residual_is_affine_in_alpha() {
        for eps in [0.0, 0.1, 0.2, 0.7] {
            let law = MinimaxToy::laws(eps).2;
            for alpha in [-1.0, -0.3, 0.0, 0.4, 1.0] {
                assert!((minimax_residual(&law, alpha) - (eps - alpha / 2.0)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn symmetric_case() {
        let s = solve_minimax_toy(0.0, &grid(1e-3)).unwrap();
        assert!(s.inf_abs_g < 1e-12);
        assert!(s.argmin_alpha.abs() < 1e-9);
    }

    #[test]
    fn interior_root() {
        let s = solve_minimax_toy(0.2, &grid(1e-3)).unwrap();
        assert!(s.inf_abs_g <= 5e-4);
        assert!((s.argmin_alpha - 0.4).abs() < 2e-3);
        assert!((s.abs_g_at_zero - 0.2).abs() < 1e-15);
    }

    #[test]
    fn boundary_minimum() {
        let s = solve_minimax_toy(0.8, &grid(1e-3)).unwrap();
        assert!((s.inf_abs_g - 0.3).abs() < 1e-12);
        assert!((s.argmin_alpha - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_grid_rejected() {
        assert!(solve_minimax_toy(0.2, &[]).is_err());
    }
}
