//! MAP estimation and the Laplace approximation.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::models::{Dataset, Likelihood, LogDensity, LogJoint, Network};
use crate::numeric::sum::{dot, log_sum_exp, norm, pairwise_sum};
use crate::numeric::{
    cholesky_with_jitter, inverse_from_cholesky, log_det_from_cholesky, sample_gaussian,
    solve_lower, standard_normal_vec, AdamState, Matrix, Provenance, RngStream, SampleSet,
};

/// Largest parameter count for which a dense Hessian is formed analytically.
pub const MAX_ANALYTIC_HESSIAN_DIM: usize = 2000;
/// Largest parameter count for the finite-difference Hessian route.
pub const MAX_FD_HESSIAN_DIM: usize = 200;

/// `N(μ, Σ)` over the parameter vector, with `L·Lᵀ = Σ` cached.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    pub chol: Matrix,
    pub prior_precision: f64,
    pub provenance: Provenance,
}

impl GaussianPosterior {
    pub fn from_covariance(
        mean: Vec<f64>,
        mut cov: Matrix,
        prior_precision: f64,
        provenance: Provenance,
    ) -> Result<Self> {
        check_len("posterior covariance", mean.len(), cov.rows())?;
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior mean"));
        }
        cov.symmetrize();
        let (chol, jitter) = cholesky_with_jitter(&cov)?;
        cov.add_diag(jitter);
        Ok(Self {
            mean,
            cov,
            chol,
            prior_precision,
            provenance,
        })
    }

    /// Builds the posterior from a lower-triangular factor; `Σ = L·Lᵀ`.
    pub fn from_factor(
        mean: Vec<f64>,
        chol: Matrix,
        prior_precision: f64,
        provenance: Provenance,
    ) -> Result<Self> {
        check_len("posterior factor", mean.len(), chol.rows())?;
        Ok(Self {
            cov: chol.lower_times_transpose(),
            mean,
            chol,
            prior_precision,
            provenance,
        })
    }

    /// `N(0, I)`.
    pub fn standard_normal(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            cov: Matrix::identity(d),
            chol: Matrix::identity(d),
            prior_precision: 1.0,
            provenance: Provenance::Manual,
        }
    }

    /// The prior `N(0, λ⁻¹ I)` itself.
    pub fn prior(d: usize, precision: f64) -> Self {
        let s = precision.powf(-0.5);
        let mut chol = Matrix::identity(d);
        chol.scale(s);
        let mut cov = Matrix::identity(d);
        cov.scale(s * s);
        Self {
            mean: vec![0.0; d],
            cov,
            chol,
            prior_precision: precision,
            provenance: Provenance::Manual,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `μ + L·z`.
    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        self.chol
            .lower_matvec(z)
            .into_iter()
            .zip(&self.mean)
            .map(|(a, m)| a + m)
            .collect()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let diff: Vec<f64> = theta.iter().zip(&self.mean).map(|(t, m)| t - m).collect();
        let z = solve_lower(&self.chol, &diff);
        let d = self.dim() as f64;
        -0.5 * dot(&z, &z) - 0.5 * log_det_from_cholesky(&self.chol) - 0.5 * d * (2.0 * PI).ln()
    }

    /// Log density at `μ + L·z` given the standard-normal pre-image `z`.
    pub fn log_density_from_noise(&self, z: &[f64]) -> f64 {
        let d = self.dim() as f64;
        -0.5 * dot(z, z) - 0.5 * log_det_from_cholesky(&self.chol) - 0.5 * d * (2.0 * PI).ln()
    }

    /// Differential entropy `d/2·(1 + log 2π) + Σ log Lᵢᵢ`.
    pub fn entropy(&self) -> f64 {
        let d = self.dim() as f64;
        0.5 * d * (1.0 + (2.0 * PI).ln()) + 0.5 * log_det_from_cholesky(&self.chol)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SampleSet> {
        sample_gaussian(&self.mean, &self.chol, n, rng, self.provenance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub max_epochs: usize,
    pub lr: f64,
    /// Convergence threshold on `‖∇ log p(θ, D)‖`.
    pub tol: f64,
    pub seed: u64,
    /// Scale of the random initialization (0 starts at the origin).
    pub init_scale: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            max_epochs: 2000,
            lr: 0.05,
            tol: 1e-6,
            seed: 0,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFit {
    pub theta: Vec<f64>,
    pub grad_norm: f64,
    pub log_joint: f64,
    pub epochs: usize,
    pub newton_steps: usize,
    pub converged: bool,
}

/// Full-batch Adam ascent on the log joint.
///
/// When the model exposes an exact Hessian, the Adam iterate is polished with
/// damped Newton steps so the returned point is a stationary point to `tol`.
pub fn fit_map(
    net: &dyn Network,
    lik: &Likelihood,
    data: &Dataset,
    precision: f64,
    config: &MapConfig,
) -> Result<MapFit> {
    let target = LogJoint::new(net, lik, data, precision)?;
    let d = net.n_params();
    let mut rng = RngStream::with_stream(config.seed, 0x004d_4150).generator();
    let mut theta: Vec<f64> = if config.init_scale > 0.0 {
        standard_normal_vec(&mut rng, d)
            .into_iter()
            .map(|z| config.init_scale * z)
            .collect()
    } else {
        vec![0.0; d]
    };
    let mut adam = AdamState::new(d, config.lr);
    let (mut value, mut grad) = target.log_density_and_grad(&theta);
    let mut epochs = 0;
    while epochs < config.max_epochs && norm(&grad) >= config.tol {
        if !value.is_finite() {
            return Err(Error::Diverged { step: epochs });
        }
        let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
        adam.step(&mut theta, &descent, config.lr)
            .map_err(|_| Error::Diverged { step: epochs })?;
        (value, grad) = target.log_density_and_grad(&theta);
        epochs += 1;
    }
    if !value.is_finite() {
        return Err(Error::Diverged { step: epochs });
    }

    let mut newton_steps = 0;
    if net.neg_hessian_log_likelihood(lik, &theta, data).is_some() {
        while norm(&grad) >= config.tol && newton_steps < 50 {
            let h = hessian_log_joint(net, lik, &theta, data, precision)?;
            let (l, _) = cholesky_with_jitter(&h)?;
            let y = solve_lower(&l, &grad);
            let step = crate::numeric::solve_lower_transpose(&l, &y);
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-10 {
                let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a + t * s).collect();
                let (v, g) = target.log_density_and_grad(&cand);
                if v.is_finite() && (v >= value || norm(&g) < norm(&grad)) {
                    theta = cand;
                    value = v;
                    grad = g;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            newton_steps += 1;
            if !accepted {
                break;
            }
        }
    }

    let grad_norm = norm(&grad);
    Ok(MapFit {
        theta,
        grad_norm,
        log_joint: value,
        epochs,
        newton_steps,
        converged: grad_norm < config.tol,
    })
}

/// Negative Hessian of the log joint (the posterior precision at `θ`).
///
/// Exact for models that provide it; otherwise central finite differences of
/// the analytic gradient, symmetrized.
pub fn hessian_log_joint(
    net: &dyn Network,
    lik: &Likelihood,
    theta: &[f64],
    data: &Dataset,
    precision: f64,
) -> Result<Matrix> {
    let target = LogJoint::new(net, lik, data, precision)?;
    net.check_theta(theta)?;
    let d = net.n_params();
    if d <= MAX_ANALYTIC_HESSIAN_DIM {
        if let Some(mut h) = net.neg_hessian_log_likelihood(lik, theta, data) {
            h.add_diag(precision);
            return Ok(h);
        }
    }
    if d > MAX_FD_HESSIAN_DIM {
        return Err(Error::InvalidArgument(format!(
            "parameter dimension {d} over the dense Hessian limit"
        )));
    }
    let eps = 1e-5;
    let mut h = Matrix::zeros(d, d);
    let mut tp = theta.to_vec();
    for j in 0..d {
        tp[j] = theta[j] + eps;
        let gp = target.log_density_and_grad(&tp).1;
        tp[j] = theta[j] - eps;
        let gm = target.log_density_and_grad(&tp).1;
        tp[j] = theta[j];
        for i in 0..d {
            h[(i, j)] = -(gp[i] - gm[i]) / (2.0 * eps);
        }
    }
    h.symmetrize();
    if !h.is_finite() {
        return Err(Error::NonFinite("finite-difference Hessian"));
    }
    Ok(h)
}

/// Generalized Gauss-Newton precision `λI + Σᵢ Jᵢᵀ Bᵢ Jᵢ`, with `Jᵢ` the output
/// Jacobian and `Bᵢ` the likelihood's negative Hessian in output space.
/// Positive definite at any `θ`; equals the Hessian for models linear in `θ`.
pub fn ggn_log_joint(
    net: &dyn Network,
    lik: &Likelihood,
    theta: &[f64],
    data: &Dataset,
    precision: f64,
) -> Result<Matrix> {
    LogJoint::new(net, lik, data, precision)?;
    net.check_theta(theta)?;
    let d = net.n_params();
    if d > MAX_ANALYTIC_HESSIAN_DIM {
        return Err(Error::InvalidArgument(format!(
            "parameter dimension {d} over the dense Hessian limit"
        )));
    }
    let mut h = Matrix::zeros(d, d);
    for row in data.x.iter_rows() {
        let jac = net.output_jacobian(theta, row);
        let b = lik.neg_hessian_f(&net.predict(theta, row));
        let c = jac.rows();
        // h += Jᵀ B J, lower triangle only
        let bj = b.matmul(&jac)?;
        for k in 0..c {
            let (jk, bk) = (jac.row(k), bj.row(k));
            for i in 0..d {
                if jk[i] == 0.0 {
                    continue;
                }
                let hr = h.row_mut(i);
                for j in 0..=i {
                    hr[j] += jk[i] * bk[j];
                }
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            h[(j, i)] = h[(i, j)];
        }
    }
    h.add_diag(precision);
    Ok(h)
}

/// `N(θ_MAP, Λ⁻¹)` from the posterior precision `Λ`.
pub fn laplace_posterior(
    theta_map: &[f64],
    precision_matrix: &Matrix,
    prior_precision: f64,
) -> Result<GaussianPosterior> {
    check_len("laplace precision", theta_map.len(), precision_matrix.rows())?;
    let mut lam = precision_matrix.clone();
    lam.symmetrize();
    let (l, _) = cholesky_with_jitter(&lam)?;
    let cov = inverse_from_cholesky(&l);
    GaussianPosterior::from_covariance(theta_map.to_vec(), cov, prior_precision, Provenance::Laplace)
}

/// Convenience: MAP fit, Hessian, and Laplace posterior in one call.
pub fn fit_laplace(
    net: &dyn Network,
    lik: &Likelihood,
    data: &Dataset,
    precision: f64,
    config: &MapConfig,
) -> Result<(GaussianPosterior, MapFit)> {
    let fit = fit_map(net, lik, data, precision, config)?;
    let h = hessian_log_joint(net, lik, &fit.theta, data, precision)?;
    Ok((laplace_posterior(&fit.theta, &h, precision)?, fit))
}

/// Validation NLL of the MC predictive `−(1/N) Σᵢ log (1/S) Σₛ p(yᵢ | θₛ)`.
pub fn mc_validation_nll(
    net: &dyn Network,
    lik: &Likelihood,
    samples: &SampleSet,
    val: &Dataset,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    lik.check_data(val)?;
    let s = samples.len() as f64;
    let mut f = vec![0.0; net.n_outputs()];
    let mut per_sample = vec![0.0; samples.len()];
    let terms: Vec<f64> = (0..val.len())
        .map(|i| {
            for (k, theta) in samples.iter().enumerate() {
                net.forward(theta, val.x.row(i), &mut f);
                per_sample[k] = lik.log_prob(&f, val, i);
            }
            // probability floor matches the NLL metric
            (log_sum_exp(&per_sample) - s.ln()).max(1e-12f64.ln())
        })
        .collect();
    Ok(-pairwise_sum(&terms) / val.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: f64,
    /// `(λ, validation NLL)`; diverged candidates are omitted.
    pub candidates: Vec<(f64, f64)>,
}

/// Picks the prior precision with the lowest validation NLL under the Laplace
/// MC predictive (`n_samples` draws, fixed seed). Ties go to the larger λ.
pub fn tune_prior_precision(
    net: &dyn Network,
    lik: &Likelihood,
    train: &Dataset,
    val: &Dataset,
    grid: &[f64],
    config: &MapConfig,
    n_samples: usize,
) -> Result<TuneResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty precision grid".into()));
    }
    if let Some(bad) = grid.iter().find(|&&l| !(l > 0.0)) {
        return Err(Error::InvalidArgument(format!("precision {bad} must be > 0")));
    }
    let mut candidates = Vec::new();
    for (i, &lam) in grid.iter().enumerate() {
        let Ok((post, _)) = fit_laplace(net, lik, train, lam, config) else {
            continue;
        };
        let mut rng = RngStream::with_stream(config.seed, 0x7475_6e65 + i as u64).generator();
        let samples = post.sample(n_samples, &mut rng)?;
        let nll = mc_validation_nll(net, lik, &samples, val)?;
        if nll.is_finite() {
            candidates.push((lam, nll));
        }
    }
    let best = candidates
        .iter()
        .copied()
        .reduce(|a, b| {
            if b.1 < a.1 || (b.1 == a.1 && b.0 > a.0) {
                b
            } else {
                a
            }
        })
        .ok_or(Error::Diverged { step: 0 })?
        .0;
    Ok(TuneResult { best, candidates })
}
