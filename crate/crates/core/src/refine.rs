//! ELBO training of a radial flow on top of a frozen Gaussian base, and a
//! mean-field Gaussian VB baseline trained with the same recipe.
//!
//! The refined density's entropy decomposes as `H[q̃] = H[q] + E_q[log|det J_F|]`,
//! so with base noise `z_s` the estimator is
//!
//! ```text
//! ELBO ≈ (1/S) Σ_s [ log p(D, F(z_s)) + log|det J_F(z_s)| ] + H[q]
//! ```
//!
//! and its pathwise gradient flows through `F` only; the base is never updated.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{init_near_identity, RadialFlowStack, RadialLayer, RefinedPosterior};
use crate::laplace::GaussianPosterior;
use crate::models::{LogDensity, Minibatcher};
use crate::numeric::sum::pairwise_sum;
use crate::numeric::{cosine_lr, standard_normal_vec, AdamState, Matrix, Provenance, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub epochs: usize,
    /// Optimizer steps per epoch.
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub n_mc: usize,
    pub flow_length: usize,
    pub seed: u64,
    /// Base-noise draws used for the end-of-epoch ELBO that selects the best iterate.
    pub eval_samples: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 1,
            lr: 0.001,
            n_mc: 32,
            flow_length: 5,
            seed: 0,
            eval_samples: 200,
        }
    }
}

impl RefineConfig {
    fn validate(&self) -> Result<()> {
        if self.n_mc == 0 || self.eval_samples == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid refine config {self:?}")));
        }
        if self.epochs > 0 && self.steps_per_epoch == 0 {
            return Err(Error::InvalidArgument("steps_per_epoch must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTrace {
    /// ELBO estimate at every optimizer step, before the update (on the step's minibatch when batching).
    pub step_elbo: Vec<f64>,
    pub step_lr: Vec<f64>,
    /// Fixed-noise ELBO after each epoch; index 0 is the initial flow.
    pub epoch_elbo: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub best_epoch: usize,
    pub best_elbo: f64,
}

/// Draws `n` standard-normal vectors of length `d`.
pub fn draw_noise<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n).map(|_| standard_normal_vec(rng, d)).collect()
}

/// ELBO estimate from given base noise.
pub fn elbo_from_noise(rp: &RefinedPosterior, target: &dyn LogDensity, noise: &[Vec<f64>]) -> f64 {
    let terms: Vec<f64> = noise
        .iter()
        .map(|z| {
            let theta = rp.base.transform(z);
            let t = rp.flow.forward_trace(&theta);
            target.log_density(&t.output) + t.log_det
        })
        .collect();
    pairwise_sum(&terms) / noise.len() as f64 + rp.base.entropy()
}

/// ELBO estimate and its gradient with respect to the raw flow parameters,
/// sharing the same base noise.
pub fn elbo_and_grad_from_noise(
    rp: &RefinedPosterior,
    target: &dyn LogDensity,
    noise: &[Vec<f64>],
) -> (f64, Vec<f64>) {
    let n = noise.len() as f64;
    let mut grad = vec![0.0; rp.flow.n_params()];
    let terms: Vec<f64> = noise
        .iter()
        .map(|z| {
            let theta = rp.base.transform(z);
            let t = rp.flow.forward_trace(&theta);
            let (lj, g) = target.log_density_and_grad(&t.output);
            let gy: Vec<f64> = g.iter().map(|v| v / n).collect();
            rp.flow.backward(&t, &gy, 1.0 / n, &mut grad);
            lj + t.log_det
        })
        .collect();
    (pairwise_sum(&terms) / n + rp.base.entropy(), grad)
}

pub fn elbo_estimate<R: Rng + ?Sized>(
    rp: &RefinedPosterior,
    target: &dyn LogDensity,
    n_mc: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be >= 1".into()));
    }
    let noise = draw_noise(rp.dim(), n_mc, rng);
    let v = elbo_from_noise(rp, target, &noise);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteElbo)
    }
}

pub fn elbo_grad<R: Rng + ?Sized>(
    rp: &RefinedPosterior,
    target: &dyn LogDensity,
    n_mc: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be >= 1".into()));
    }
    let noise = draw_noise(rp.dim(), n_mc, rng);
    let (_, g) = elbo_and_grad_from_noise(rp, target, &noise);
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    Ok(g)
}

/// Trains a near-identity radial flow of `config.flow_length` layers on top of
/// `base` by Adam with cosine decay, returning the best iterate by the
/// fixed-noise end-of-epoch ELBO.
pub fn refine(
    base: &GaussianPosterior,
    target: &dyn LogDensity,
    config: &RefineConfig,
) -> Result<(RefinedPosterior, ElboTrace)> {
    let root = RngStream::new(config.seed);
    let flow = init_near_identity(config.flow_length, base, &mut root.split(1).generator());
    refine_from(base, flow, target, config)
}

/// Like [`refine`] but starting from a given flow.
pub fn refine_from(
    base: &GaussianPosterior,
    flow: RadialFlowStack,
    target: &dyn LogDensity,
    config: &RefineConfig,
) -> Result<(RefinedPosterior, ElboTrace)> {
    train_flow(base, flow, target, None, config)
}

/// [`refine`] with every optimizer step on a fresh minibatch; the best-iterate
/// evaluation still uses the full data.
pub fn refine_minibatch(
    base: &GaussianPosterior,
    batches: &Minibatcher,
    config: &RefineConfig,
) -> Result<(RefinedPosterior, ElboTrace)> {
    let root = RngStream::new(config.seed);
    let flow = init_near_identity(config.flow_length, base, &mut root.split(1).generator());
    train_flow(base, flow, &batches.full, Some(batches), config)
}

fn train_flow(
    base: &GaussianPosterior,
    flow: RadialFlowStack,
    target: &dyn LogDensity,
    batches: Option<&Minibatcher>,
    config: &RefineConfig,
) -> Result<(RefinedPosterior, ElboTrace)> {
    config.validate()?;
    let root = RngStream::new(config.seed);
    let d = base.dim();
    let eval_noise = draw_noise(d, config.eval_samples, &mut root.split(2).generator());
    let mut step_rng = root.split(3).generator();

    let mut rp = RefinedPosterior::new(base.clone(), flow)?;
    if config.epochs == 0 {
        // an untrained refinement is the exact identity, so predictives equal the base
        for layer in &mut rp.flow.layers {
            *layer = RadialLayer::identity(layer.z0.clone(), layer.alpha());
        }
    }
    let mut params = rp.flow.params();
    let mut adam = AdamState::new(params.len(), config.lr);
    let total = config.epochs * config.steps_per_epoch;

    let mut trace = ElboTrace::default();
    let init_elbo = elbo_from_noise(&rp, target, &eval_noise);
    if !init_elbo.is_finite() {
        return Err(Error::NonFiniteElbo);
    }
    trace.epoch_elbo.push(init_elbo);
    trace.best_elbo = init_elbo;
    let mut best_params = params.clone();

    let mut step = 0;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        for _ in 0..config.steps_per_epoch {
            let lr = cosine_lr(step, total, config.lr)?;
            let noise = draw_noise(d, config.n_mc, &mut step_rng);
            let (elbo, grad) = match batches {
                Some(b) => elbo_and_grad_from_noise(&rp, &b.draw(&mut step_rng), &noise),
                None => elbo_and_grad_from_noise(&rp, target, &noise),
            };
            if !elbo.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step });
            }
            trace.step_elbo.push(elbo);
            trace.step_lr.push(lr);
            let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
            // lr reaches 0 on the final step; Adam requires a positive rate
            if lr > 0.0 {
                adam.step(&mut params, &descent, lr)?;
                rp.flow.set_params(&params)?;
            }
            step += 1;
        }
        let eval = elbo_from_noise(&rp, target, &eval_noise);
        if !eval.is_finite() {
            return Err(Error::Diverged { step });
        }
        trace.epoch_elbo.push(eval);
        trace.epoch_seconds.push(started.elapsed().as_secs_f64());
        if eval > trace.best_elbo {
            trace.best_elbo = eval;
            trace.best_epoch = epoch;
            best_params.clone_from(&params);
        }
    }
    rp.flow.set_params(&best_params)?;
    Ok((rp, trace))
}

/// Starting point of the mean-field optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct VbInit {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl VbInit {
    /// Start at the prior `N(0, λ⁻¹ I)`.
    pub fn prior(d: usize, precision: f64) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![precision.powf(-0.5); d],
        }
    }
}

fn diag_elbo(mean: &[f64], log_std: &[f64], target: &dyn LogDensity, noise: &[Vec<f64>]) -> f64 {
    let d = mean.len() as f64;
    let terms: Vec<f64> = noise
        .iter()
        .map(|e| {
            let theta: Vec<f64> = mean
                .iter()
                .zip(log_std)
                .zip(e)
                .map(|((m, ls), z)| m + ls.exp() * z)
                .collect();
            target.log_density(&theta)
        })
        .collect();
    pairwise_sum(&terms) / noise.len() as f64
        + log_std.iter().sum::<f64>()
        + 0.5 * d * (1.0 + (2.0 * std::f64::consts::PI).ln())
}

/// Diagonal-covariance Gaussian VB by reparameterized ELBO ascent
/// (Adam + cosine decay, best fixed-noise iterate).
pub fn meanfield_vb(
    target: &dyn LogDensity,
    precision: f64,
    init: &VbInit,
    config: &RefineConfig,
) -> Result<(GaussianPosterior, ElboTrace)> {
    train_meanfield(target, None, precision, init, config)
}

/// [`meanfield_vb`] with minibatch steps and full-data evaluation.
pub fn meanfield_vb_minibatch(
    batches: &Minibatcher,
    init: &VbInit,
    config: &RefineConfig,
) -> Result<(GaussianPosterior, ElboTrace)> {
    train_meanfield(&batches.full, Some(batches), batches.full.precision, init, config)
}

fn train_meanfield(
    target: &dyn LogDensity,
    batches: Option<&Minibatcher>,
    precision: f64,
    init: &VbInit,
    config: &RefineConfig,
) -> Result<(GaussianPosterior, ElboTrace)> {
    config.validate()?;
    let d = target.dim();
    if init.mean.len() != d || init.std.len() != d {
        return Err(Error::DimensionMismatch {
            context: "vb init",
            expected: d,
            found: init.mean.len(),
        });
    }
    let root = RngStream::with_stream(config.seed, 0x7662);
    let eval_noise = draw_noise(d, config.eval_samples, &mut root.split(2).generator());
    let mut step_rng = root.split(3).generator();

    // params = [mean…, log_std…]
    let mut params: Vec<f64> = init
        .mean
        .iter()
        .copied()
        .chain(init.std.iter().map(|s| s.ln()))
        .collect();
    let mut adam = AdamState::new(2 * d, config.lr);
    let total = config.epochs * config.steps_per_epoch;
    let mut trace = ElboTrace::default();
    let e0 = diag_elbo(&params[..d], &params[d..], target, &eval_noise);
    trace.epoch_elbo.push(e0);
    trace.best_elbo = e0;
    let mut best = params.clone();

    let mut step = 0;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        for _ in 0..config.steps_per_epoch {
            let lr = cosine_lr(step, total, config.lr)?;
            let noise = draw_noise(d, config.n_mc, &mut step_rng);
            let batch = batches.map(|b| b.draw(&mut step_rng));
            let step_target: &dyn LogDensity = match &batch {
                Some(b) => b,
                None => target,
            };
            let n = noise.len() as f64;
            let (mean, log_std) = params.split_at(d);
            let mut grad = vec![0.0; 2 * d];
            let mut vals = Vec::with_capacity(noise.len());
            for e in &noise {
                let theta: Vec<f64> = mean
                    .iter()
                    .zip(log_std)
                    .zip(e)
                    .map(|((m, ls), z)| m + ls.exp() * z)
                    .collect();
                let (v, g) = step_target.log_density_and_grad(&theta);
                vals.push(v);
                for i in 0..d {
                    grad[i] += g[i] / n;
                    grad[d + i] += g[i] * log_std[i].exp() * e[i] / n;
                }
            }
            grad[d..].iter_mut().for_each(|g| *g += 1.0);
            let elbo = pairwise_sum(&vals) / n
                + log_std.iter().sum::<f64>()
                + 0.5 * d as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln());
            if !elbo.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step });
            }
            trace.step_elbo.push(elbo);
            trace.step_lr.push(lr);
            if lr > 0.0 {
                let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
                adam.step(&mut params, &descent, lr)?;
            }
            step += 1;
        }
        let eval = diag_elbo(&params[..d], &params[d..], target, &eval_noise);
        if !eval.is_finite() {
            return Err(Error::Diverged { step });
        }
        trace.epoch_elbo.push(eval);
        trace.epoch_seconds.push(started.elapsed().as_secs_f64());
        if eval > trace.best_elbo {
            trace.best_elbo = eval;
            trace.best_epoch = epoch;
            best.clone_from(&params);
        }
    }
    let std: Vec<f64> = best[d..].iter().map(|ls| ls.exp()).collect();
    let post = GaussianPosterior::from_factor(
        best[..d].to_vec(),
        Matrix::from_diag(&std),
        precision,
        Provenance::Vb,
    )?;
    Ok((post, trace))
}
