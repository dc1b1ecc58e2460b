use super::nets::Trainable;
use crate::error::{FusionError, Result};
use crate::scalar::Scalar;

/// Central-difference gradient of `loss` at `params`:
/// `(L(p + h e_i) - L(p - h e_i)) / (2h)` per coordinate.
pub fn finite_diff_grad<S, F>(params: &[S], mut loss: F, h: S) -> Result<Vec<S>>
where
    S: Scalar,
    F: FnMut(&[S]) -> S,
{
    if !(h > S::zero()) {
        return Err(FusionError::InvalidConfig(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut p = params.to_vec();
    let two_h = h + h;
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p);
        p[i] = orig - h;
        let down = loss(&p);
        p[i] = orig;
        grad.push((up - down) / two_h);
    }
    Ok(grad)
}

/// Finite-difference gradient of `loss(net)` with respect to the network parameters.
pub fn finite_diff_net<S, T, F>(net: &T, mut loss: F, h: S) -> Result<Vec<S>>
where
    S: Scalar,
    T: Trainable<S> + Clone,
    F: FnMut(&T) -> S,
{
    let mut work = net.clone();
    let base = net.params_flat();
    finite_diff_grad(
        &base,
        |p| {
            work.set_params_flat(p).expect("same parameter count");
            loss(&work)
        },
        h,
    )
}

/// Max over coordinates of `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error<S: Scalar>(a: &[S], b: &[S], floor: S) -> S {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(S::zero(), S::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let g = finite_diff_grad(&[3.0f64], |p| 0.5 * p[0] * p[0], 1e-5).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let g = finite_diff_grad(&[1.0f64, -2.0, 0.5], |_| 4.2, 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nonpositive_step_rejected() {
        assert!(finite_diff_grad(&[1.0f64], |p| p[0], 0.0).is_err());
        assert!(finite_diff_grad(&[1.0f64], |p| p[0], -1e-3).is_err());
    }
}
