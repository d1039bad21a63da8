//! Central finite differences, used as a test oracle for analytic gradients.

use crate::error::{Error, Result};
use crate::numeric::matrix::Matrix;

/// `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        xp[i] = x[i] + eps;
        let fp = f(&xp);
        xp[i] = x[i] - eps;
        let fm = f(&xp);
        xp[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        out.push((fp - fm) / (2.0 * eps));
    }
    Ok(out)
}

/// Central-difference Jacobian of a vector function; row `k` is `∂fₖ/∂x`.
pub fn finite_diff_jacobian<F>(mut f: F, x: &[f64], eps: f64) -> Result<Matrix>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let m = f(x).len();
    let mut jac = Matrix::zeros(m, x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + eps;
        let fp = f(&xp);
        xp[i] = x[i] - eps;
        let fm = f(&xp);
        xp[i] = x[i];
        for k in 0..m {
            let v = (fp[k] - fm[k]) / (2.0 * eps);
            if !v.is_finite() {
                return Err(Error::NonFinite("finite-difference jacobian"));
            }
            jac[(k, i)] = v;
        }
    }
    Ok(jac)
}

/// Relative error `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(floor, f64::max);
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::numeric::rng::RngStream;

    #[test]
    fn half_squared_norm() {
        let g = finite_diff_grad(|x| 0.5 * x.iter().map(|v| v * v).sum::<f64>(), &[1.0, 2.0], 1e-5)
            .unwrap();
        assert!((g[0] - 1.0).abs() < 1e-6 && (g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_grad(|_| 4.2, &[0.3, -1.0, 8.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_exp_matches_analytic() {
        let mut rng = RngStream::new(11).generator();
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = finite_diff_grad(|x| x.iter().map(|v| v.exp()).sum(), &x, 1e-5).unwrap();
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - xi.exp()).abs() / xi.exp() < 1e-5);
        }
    }

    #[test]
    fn non_finite_evaluation_errors() {
        assert!(finite_diff_grad(|x| 1.0 / (x[0] - 1e-6), &[1e-6], 1e-5).is_ok());
        assert!(finite_diff_grad(|x| x[0].ln(), &[0.0], 1e-5).is_err());
    }
}
