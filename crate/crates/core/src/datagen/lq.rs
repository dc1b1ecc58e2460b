//! Linear-quadratic instances with closed-form optima.
//!
//! Observational risk `R_o = 1/2 th'H th + b'th`, randomized risk
//! `R_r = 1/2 th'H_r th + b_r'th`, moment `g = A th - c`. The randomized risk is
//! minimized at a point satisfying `g = 0`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{FusionError, Result};

const EIG_MIN: f64 = 0.5;
const EIG_MAX: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LqToy {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
    pub h_r: DMatrix<f64>,
    pub b_r: DVector<f64>,
    /// Constrained minimizer and its multiplier: `H th* + b + A' lam* = 0`, `A th* = c`.
    pub theta_star: DVector<f64>,
    pub lambda_star: DVector<f64>,
}

/// Solves `min 1/2 x'Hx + b'x  s.t.  Ax = c` through the KKT system.
pub fn solve_kkt(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    a: &DMatrix<f64>,
    c: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = h.nrows();
    let k = a.nrows();
    if h.ncols() != n || b.len() != n || a.ncols() != n || c.len() != k {
        return Err(FusionError::DimensionMismatch {
            context: "KKT system",
            expected: n,
            got: a.ncols(),
        });
    }
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    kkt.view_mut((0, n), (n, k)).copy_from(&a.transpose());
    kkt.view_mut((n, 0), (k, n)).copy_from(a);
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-b));
    rhs.rows_mut(n, k).copy_from(c);
    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| FusionError::InvalidConfig("singular KKT system".into()))?;
    Ok((sol.rows(0, n).into_owned(), sol.rows(n, k).into_owned()))
}

fn random_spd(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let eig = DVector::from_fn(dim, |i, _| match i {
        0 => EIG_MIN,
        i if i + 1 == dim => EIG_MAX,
        _ => rng.random_range(EIG_MIN..EIG_MAX),
    });
    let h = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    (&h + h.transpose()) * 0.5
}

fn spd_solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    m.clone().cholesky().expect("matrix is positive definite").solve(rhs)
}

impl LqToy {
    pub fn from_parts(
        h: DMatrix<f64>,
        b: DVector<f64>,
        a: DMatrix<f64>,
        c: DVector<f64>,
        h_r: DMatrix<f64>,
        b_r: DVector<f64>,
    ) -> Result<Self> {
        if h.clone().cholesky().is_none() || h_r.clone().cholesky().is_none() {
            return Err(FusionError::InvalidConfig(
                "risk Hessians must be positive definite".into(),
            ));
        }
        let (theta_star, lambda_star) = solve_kkt(&h, &b, &a, &c)?;
        Ok(Self {
            h,
            b,
            a,
            c,
            h_r,
            b_r,
            theta_star,
            lambda_star,
        })
    }

    /// Random instance with `H` eigenvalues in `[0.5, 5]` (both endpoints
    /// attained) and a full-row-rank Gaussian `A`. The observational minimizer
    /// is generically infeasible.
    pub fn random(dim: usize, k: usize, seed: u64) -> Result<Self> {
        if !(dim >= k && k >= 1) {
            return Err(FusionError::InvalidConfig(format!(
                "need dim >= K >= 1, got {dim}, {k}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_spd(dim, &mut rng);
        let h_r = random_spd(dim, &mut rng);
        let scale = 1.0 / (dim as f64).sqrt();
        let a = loop {
            let a = DMatrix::from_fn(k, dim, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
            if a.rank(1e-8) == k {
                break a;
            }
        };
        let b = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let theta_r = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b_r = -(&h_r * &theta_r);
        let c = &a * &theta_r;
        Self::from_parts(h, b, a, c, h_r, b_r)
    }

    /// Like [`LqToy::random`] but with the observational minimizer feasible,
    /// so enforcing the constraint costs no observational risk.
    pub fn benign(dim: usize, k: usize, seed: u64) -> Result<Self> {
        let mut toy = Self::random(dim, k, seed)?;
        let theta_r = toy.randomized_minimizer();
        toy.b = -(&toy.h * &theta_r);
        let (ts, ls) = solve_kkt(&toy.h, &toy.b, &toy.a, &toy.c)?;
        toy.theta_star = ts;
        toy.lambda_star = ls;
        Ok(toy)
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_constraints(&self) -> usize {
        self.a.nrows()
    }

    pub fn risk(&self, theta: &DVector<f64>) -> f64 {
        0.5 * theta.dot(&(&self.h * theta)) + self.b.dot(theta)
    }

    pub fn risk_grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.h * theta + &self.b
    }

    pub fn risk_r(&self, theta: &DVector<f64>) -> f64 {
        0.5 * theta.dot(&(&self.h_r * theta)) + self.b_r.dot(theta)
    }

    pub fn risk_r_grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.h_r * theta + &self.b_r
    }

    pub fn residual(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.a * theta - &self.c
    }

    pub fn risk_star(&self) -> f64 {
        self.risk(&self.theta_star)
    }

    pub fn lagrangian(&self, theta: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
        self.risk(theta) + lambda.dot(&self.residual(theta))
    }

    pub fn unconstrained_minimizer(&self) -> DVector<f64> {
        spd_solve(&self.h, &(-&self.b))
    }

    pub fn randomized_minimizer(&self) -> DVector<f64> {
        spd_solve(&self.h_r, &(-&self.b_r))
    }

    /// `argmin R_o + alpha R_r = (H + alpha H_r)^{-1} (-b - alpha b_r)`.
    pub fn weighted_minimizer(&self, alpha: f64) -> DVector<f64> {
        let m = &self.h + &self.h_r * alpha;
        spd_solve(&m, &(-&self.b - &self.b_r * alpha))
    }

    /// `argmin R_o + nu'g + rho/2 |g|^2`.
    pub fn penalty_minimizer(&self, rho: f64, nu: &DVector<f64>) -> DVector<f64> {
        let at = self.a.transpose();
        let m = &self.h + &at * &self.a * rho;
        let rhs = -&self.b - &at * nu + &at * &self.c * rho;
        spd_solve(&m, &rhs)
    }

    /// Hessian of the quadratic-penalty objective, `H + rho A'A`.
    pub fn penalty_hessian(&self, rho: f64) -> DMatrix<f64> {
        &self.h + self.a.transpose() * &self.a * rho
    }

    /// Strong convexity of `R_o`.
    pub fn mu(&self) -> f64 {
        self.h.symmetric_eigenvalues().min()
    }

    pub fn smoothness(&self) -> f64 {
        self.h.symmetric_eigenvalues().max()
    }

    /// Operator norm of `A`, the Lipschitz constant of `g`.
    pub fn l_g(&self) -> f64 {
        self.a.singular_values().max()
    }
}

/// Condition number of a symmetric positive definite matrix.
pub fn spd_condition(m: &DMatrix<f64>) -> f64 {
    let e = m.symmetric_eigenvalues();
    e.max() / e.min()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_optimum_for_trivial_instance() {
        let n = 3;
        let mut a = DMatrix::zeros(1, n);
        a[(0, 0)] = 1.0;
        let toy = LqToy::from_parts(
            DMatrix::identity(n, n),
            DVector::zeros(n),
            a,
            DVector::zeros(1),
            DMatrix::identity(n, n),
            DVector::zeros(n),
        )
        .unwrap();
        assert!(toy.theta_star.norm() < 1e-15);
    }

    #[test]
    fn projection_instance() {
        let n = 3;
        let mut a = DMatrix::zeros(1, n);
        a[(0, 0)] = 1.0;
        let mut b = DVector::zeros(n);
        b[0] = -1.0;
        let toy = LqToy::from_parts(
            DMatrix::identity(n, n),
            b,
            a,
            DVector::zeros(1),
            DMatrix::identity(n, n),
            DVector::zeros(n),
        )
        .unwrap();
        assert!(toy.theta_star.norm() < 1e-15);
        let gap = toy.risk_star() - toy.risk(&toy.unconstrained_minimizer());
        assert!((gap - 0.5).abs() < 1e-15);
    }

    #[test]
    fn random_instance_satisfies_kkt() {
        for seed in 0..5 {
            let toy = LqToy::random(8, 3, seed).unwrap();
            assert!(toy.residual(&toy.theta_star).norm() < 1e-10);
            let stat = &toy.h * &toy.theta_star + &toy.b + toy.a.transpose() * &toy.lambda_star;
            assert!(stat.norm() < 1e-8);
            assert!((toy.mu() - 0.5).abs() < 1e-10);
            assert!((toy.smoothness() - 5.0).abs() < 1e-10);
        }
    }

    #[test]
    fn benign_has_feasible_observational_minimizer() {
        let toy = LqToy::benign(6, 2, 4).unwrap();
        assert!(toy.residual(&toy.unconstrained_minimizer()).norm() < 1e-10);
        assert!(toy.lambda_star.norm() < 1e-8);
    }

    #[test]
    fn weighted_minimizer_is_stationary() {
        let toy = LqToy::random(5, 1, 9).unwrap();
        let th = toy.weighted_minimizer(0.7);
        let g = toy.risk_grad(&th) + toy.risk_r_grad(&th) * 0.7;
        assert!(g.norm() < 1e-10);
    }

    #[test]
    fn dim_below_constraints_rejected() {
        assert!(LqToy::random(2, 3, 0).is_err());
    }
}
