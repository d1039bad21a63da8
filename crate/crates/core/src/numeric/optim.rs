//! Adam and the cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    /// Fresh state with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }

    /// One bias-corrected Adam *descent* step on `params` with learning rate `lr`.
    ///
    /// Callers maximizing an objective pass the negated gradient.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        check_len("adam params/grad", params.len(), grad.len())?;
        check_len("adam state", self.m.len(), params.len())?;
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be > 0")));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(i));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// `lr0 · ½(1 + cos(π·step/total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("cosine schedule needs total_steps > 0".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_is_noop() {
        let mut s = AdamState::new(3, 0.1);
        let mut p = vec![1.0, -2.0, 3.0];
        s.step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_on_square_moves_downhill() {
        // grad of x² at 1 is 2; first bias-corrected step is lr·sign(g)
        let mut s = AdamState::new(1, 0.1);
        let mut x = vec![1.0];
        s.step(&mut x, &[2.0], 0.1).unwrap();
        assert!(x[0] < 1.0);
        assert!((x[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut s = AdamState::new(1, 0.1);
        let mut x = vec![0.0];
        for _ in 0..500 {
            let g = 2.0 * (x[0] - 3.0);
            s.step(&mut x, &[g], 0.1).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "x = {}", x[0]);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut s = AdamState::new(2, 0.1);
        let mut p = vec![0.0, 0.0];
        assert!(matches!(
            s.step(&mut p, &[0.0, f64::NAN], 0.1),
            Err(Error::NonFiniteGradient(1))
        ));
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.001).unwrap(), 0.001);
        assert!(cosine_lr(100, 100, 0.001).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.001).unwrap() - 0.0005).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 0.001).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_monotone(total in 1usize..500, lr0 in 1e-5f64..1.0) {
            let mut prev = f64::INFINITY;
            for step in 0..=total {
                let lr = cosine_lr(step, total, lr0).unwrap();
                prop_assert!(lr <= prev);
                prev = lr;
            }
        }

        // Holds for any state whose moment buffers are empty; with non-zero
        // momentum Adam keeps moving, which is the standard algorithm.
        #[test]
        fn zero_grad_identity_from_rest(
            t in 0u64..1000,
            lr in 1e-4f64..1.0,
            p in proptest::collection::vec(-10f64..10.0, 1..8),
        ) {
            let mut s = AdamState::new(p.len(), lr);
            s.t = t;
            let mut q = p.clone();
            s.step(&mut q, &vec![0.0; p.len()], lr).unwrap();
            prop_assert_eq!(q, p);
        }
    }
}
