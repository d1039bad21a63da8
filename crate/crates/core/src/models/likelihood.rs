use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::data::{Dataset, Targets};
use crate::numeric::sum::{log_sigmoid, log_sum_exp, sigmoid, softmax};
use crate::numeric::Matrix;

/// Observation model `p(y | f)` for a network output `f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Likelihood {
    /// `f ∈ R^C`, `p(y = k) = softmax(f)ₖ`.
    Categorical,
    /// `f ∈ R`, `p(y = 1) = σ(f)`.
    Bernoulli,
    /// `f ∈ R`, `y ~ N(f, σ²)` with fixed noise.
    Gaussian { sigma: f64 },
}

impl Likelihood {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("noise std {sigma} must be > 0")));
        }
        Ok(Likelihood::Gaussian { sigma })
    }

    /// Network output width this likelihood expects for `n_classes`.
    pub fn n_outputs(&self, n_classes: usize) -> usize {
        match self {
            Likelihood::Categorical => n_classes,
            _ => 1,
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self, Likelihood::Gaussian { .. })
    }

    pub(crate) fn check_data(&self, data: &Dataset) -> Result<()> {
        match (self, &data.targets) {
            (Likelihood::Gaussian { .. }, Targets::Real(_)) => Ok(()),
            (Likelihood::Gaussian { .. }, Targets::Classes(v)) if v.is_empty() => Ok(()),
            (Likelihood::Bernoulli, Targets::Classes(_)) if data.n_classes <= 2 => Ok(()),
            (Likelihood::Categorical, Targets::Classes(_)) => Ok(()),
            _ => Err(Error::InvalidArgument(format!(
                "likelihood {self:?} incompatible with dataset targets"
            ))),
        }
    }

    /// `log p(yᵢ | f)`.
    pub fn log_prob(&self, f: &[f64], data: &Dataset, i: usize) -> f64 {
        match (self, &data.targets) {
            (Likelihood::Categorical, Targets::Classes(y)) => f[y[i]] - log_sum_exp(f),
            (Likelihood::Bernoulli, Targets::Classes(y)) => {
                if y[i] == 1 {
                    log_sigmoid(f[0])
                } else {
                    log_sigmoid(-f[0])
                }
            }
            (Likelihood::Gaussian { sigma }, Targets::Real(y)) => {
                let r = (y[i] - f[0]) / sigma;
                -0.5 * r * r - sigma.ln() - 0.5 * (2.0 * PI).ln()
            }
            _ => unreachable!("checked by check_data"),
        }
    }

    /// Writes `∂ log p(yᵢ | f) / ∂f` into `out`.
    pub fn grad_f(&self, f: &[f64], data: &Dataset, i: usize, out: &mut [f64]) {
        match (self, &data.targets) {
            (Likelihood::Categorical, Targets::Classes(y)) => {
                let p = softmax(f);
                for (k, (o, pk)) in out.iter_mut().zip(p).enumerate() {
                    *o = if k == y[i] { 1.0 } else { 0.0 } - pk;
                }
            }
            (Likelihood::Bernoulli, Targets::Classes(y)) => {
                out[0] = y[i] as f64 - sigmoid(f[0]);
            }
            (Likelihood::Gaussian { sigma }, Targets::Real(y)) => {
                out[0] = (y[i] - f[0]) / (sigma * sigma);
            }
            _ => unreachable!("checked by check_data"),
        }
    }

    /// `−∂² log p(y | f) / ∂f²`, which does not depend on `y` for these models.
    pub fn neg_hessian_f(&self, f: &[f64]) -> Matrix {
        match self {
            Likelihood::Categorical => {
                let p = softmax(f);
                let c = p.len();
                let mut b = Matrix::zeros(c, c);
                for k in 0..c {
                    for l in 0..c {
                        b[(k, l)] = if k == l { p[k] } else { 0.0 } - p[k] * p[l];
                    }
                }
                b
            }
            Likelihood::Bernoulli => {
                let s = sigmoid(f[0]);
                Matrix::from_diag(&[s * (1.0 - s)])
            }
            Likelihood::Gaussian { sigma } => Matrix::from_diag(&[1.0 / (sigma * sigma)]),
        }
    }

    /// Plug-in class probabilities for one output vector.
    pub fn probs(&self, f: &[f64]) -> Vec<f64> {
        match self {
            Likelihood::Categorical => softmax(f),
            Likelihood::Bernoulli => {
                let p = sigmoid(f[0]);
                vec![1.0 - p, p]
            }
            Likelihood::Gaussian { .. } => vec![1.0],
        }
    }
}
