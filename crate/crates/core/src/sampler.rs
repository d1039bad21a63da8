//! Hamiltonian Monte Carlo with an identity mass matrix, dual-averaging step
//! size adaptation during warmup, and split-R̂ diagnostics.
//!
//! Each chain owns its own random stream, so chains can run on separate
//! threads and the result is independent of scheduling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::laplace::GaussianPosterior;
use crate::models::LogDensity;
use crate::numeric::sum::{dot, mean, variance};
use crate::numeric::{par_map, standard_normal_vec, Matrix, Provenance, RngStream, SampleSet};

/// Energy error above which a transition counts as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    /// Kept draws per chain.
    pub n_samples: usize,
    pub n_leapfrog: usize,
    pub target_accept: f64,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_warmup: 500,
            n_samples: 600,
            n_leapfrog: 32,
            target_accept: 0.8,
            seed: 0,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 || self.n_samples == 0 || self.n_leapfrog == 0 {
            return Err(Error::InvalidArgument("hmc counts must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target accept rate {} outside (0, 1)",
                self.target_accept
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSet {
    pub chains: Vec<SampleSet>,
    /// Post-warmup mean Metropolis acceptance probability per chain.
    pub accept_rates: Vec<f64>,
    pub step_sizes: Vec<f64>,
    /// Divergent transitions per chain, warmup included.
    pub divergences: Vec<usize>,
}

impl ChainSet {
    pub fn dim(&self) -> usize {
        self.chains.first().map_or(0, SampleSet::dim)
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    /// Draws per chain.
    pub fn len(&self) -> usize {
        self.chains.first().map_or(0, SampleSet::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All chains stacked in chain order.
    pub fn pooled(&self) -> SampleSet {
        let d = self.dim();
        let mut data = Vec::with_capacity(self.n_chains() * self.len() * d);
        for c in &self.chains {
            data.extend_from_slice(c.samples.data());
        }
        let rows = self.n_chains() * self.len();
        SampleSet::new(Matrix::from_vec(rows, d, data).expect("chains share shape"), Provenance::Hmc)
    }

    /// Maps every draw through `f`, e.g. from whitened back to original coordinates.
    pub fn map_samples(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> ChainSet {
        let chains = self
            .chains
            .iter()
            .map(|c| {
                let rows: Vec<Vec<f64>> = c.iter().map(&f).collect();
                SampleSet::new(Matrix::from_rows(&rows).expect("mapped rows share width"), c.provenance)
            })
            .collect();
        ChainSet { chains, ..self.clone() }
    }
}

/// `n_steps` leapfrog steps of size `step` for `H = −log p(θ) + ½‖p‖²`.
pub fn leapfrog<F>(mut grad_log_post: F, theta: &[f64], momentum: &[f64], step: f64, n_steps: usize) -> (Vec<f64>, Vec<f64>)
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut q = theta.to_vec();
    let mut p = momentum.to_vec();
    if n_steps == 0 {
        return (q, p);
    }
    let mut g = grad_log_post(&q);
    for _ in 0..n_steps {
        half_kick(&mut p, &g, step);
        drift(&mut q, &p, step);
        g = grad_log_post(&q);
        half_kick(&mut p, &g, step);
    }
    (q, p)
}

fn half_kick(p: &mut [f64], g: &[f64], step: f64) {
    for (pi, gi) in p.iter_mut().zip(g) {
        *pi += 0.5 * step * gi;
    }
}

fn drift(q: &mut [f64], p: &[f64], step: f64) {
    for (qi, pi) in q.iter_mut().zip(p) {
        *qi += step * pi;
    }
}

#[derive(Clone)]
struct State {
    q: Vec<f64>,
    logp: f64,
    grad: Vec<f64>,
}

impl State {
    fn at(target: &dyn LogDensity, q: Vec<f64>) -> Self {
        let (logp, grad) = target.log_density_and_grad(&q);
        Self { q, logp, grad }
    }

    fn is_finite(&self) -> bool {
        self.logp.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

struct Transition {
    state: State,
    accept_prob: f64,
    divergent: bool,
}

fn transition<R: Rng + ?Sized>(
    target: &dyn LogDensity,
    current: &State,
    step: f64,
    n_leapfrog: usize,
    rng: &mut R,
) -> Transition {
    let p0 = standard_normal_vec(rng, current.q.len());
    let h0 = -current.logp + 0.5 * dot(&p0, &p0);
    let mut p = p0;
    let mut s = current.clone();
    let mut finite = true;
    for _ in 0..n_leapfrog {
        half_kick(&mut p, &s.grad, step);
        drift(&mut s.q, &p, step);
        s = State::at(target, std::mem::take(&mut s.q));
        if !s.is_finite() {
            finite = false;
            break;
        }
        half_kick(&mut p, &s.grad, step);
    }
    let h1 = if finite { -s.logp + 0.5 * dot(&p, &p) } else { f64::INFINITY };
    let delta = h1 - h0;
    let divergent = !delta.is_finite() || delta > DIVERGENCE_THRESHOLD;
    let accept_prob = if divergent { 0.0 } else { (-delta).exp().min(1.0) };
    let accepted = accept_prob > 0.0 && rng.random::<f64>() < accept_prob;
    Transition {
        state: if accepted { s } else { current.clone() },
        accept_prob,
        divergent,
    }
}

/// Dual averaging of `log ε` toward a target acceptance rate.
struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    m: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            h_bar: 0.0,
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            m: 0.0,
            target,
        }
    }

    fn update(&mut self, accept_prob: f64) {
        self.m += 1.0;
        let w = 1.0 / (self.m + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        self.log_eps = (self.mu - self.m.sqrt() / Self::GAMMA * self.h_bar).clamp(-30.0, 5.0);
        let eta = self.m.powf(-Self::KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
    }

    fn step(&self) -> f64 {
        self.log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Doubles or halves a unit step until one leapfrog step's acceptance
/// probability crosses ½.
fn initial_step_size<R: Rng + ?Sized>(target: &dyn LogDensity, s: &State, rng: &mut R) -> f64 {
    let accept_at = |eps: f64, p0: &[f64]| -> f64 {
        let h0 = -s.logp + 0.5 * dot(p0, p0);
        let mut p = p0.to_vec();
        let mut q = s.q.clone();
        half_kick(&mut p, &s.grad, eps);
        drift(&mut q, &p, eps);
        let n = State::at(target, q);
        if !n.is_finite() {
            return 0.0;
        }
        half_kick(&mut p, &n.grad, eps);
        let d = -n.logp + 0.5 * dot(&p, &p) - h0;
        if d.is_finite() { (-d).exp().min(1.0) } else { 0.0 }
    };
    let p0 = standard_normal_vec(rng, s.q.len());
    let mut eps = 1.0;
    let up = accept_at(eps, &p0) > 0.5;
    for _ in 0..60 {
        let a = accept_at(eps, &p0);
        if up && a <= 0.5 {
            return eps / 2.0;
        }
        if !up && a > 0.5 {
            return eps;
        }
        eps = if up { eps * 2.0 } else { eps / 2.0 };
    }
    eps
}

struct ChainOutput {
    samples: SampleSet,
    accept_rate: f64,
    step: f64,
    divergences: usize,
}

fn run_chain(target: &dyn LogDensity, init: &[f64], config: &HmcConfig, stream: RngStream) -> Result<ChainOutput> {
    let mut rng = stream.generator();
    let d = target.dim();
    let mut state = State::at(target, init.to_vec());
    if !state.is_finite() {
        return Err(Error::NonFinite("log density at chain initialisation"));
    }
    let eps0 = initial_step_size(target, &state, &mut rng);
    let mut da = DualAveraging::new(eps0, config.target_accept);
    let mut divergences = 0;
    let mut warm_divergent = 0;
    for _ in 0..config.n_warmup {
        let t = transition(target, &state, da.step(), config.n_leapfrog, &mut rng);
        if t.divergent {
            divergences += 1;
            warm_divergent += 1;
        }
        da.update(t.accept_prob);
        state = t.state;
    }
    if config.n_warmup > 0 && warm_divergent == config.n_warmup {
        return Err(Error::AdaptationFailed);
    }
    let step = if config.n_warmup > 0 { da.final_step() } else { eps0 };
    let mut samples = Matrix::zeros(config.n_samples, d);
    let mut accept_sum = 0.0;
    for s in 0..config.n_samples {
        // ±10% step jitter breaks periodic trajectories of fixed-length HMC
        let jitter = 0.9 + 0.2 * rng.random::<f64>();
        let t = transition(target, &state, step * jitter, config.n_leapfrog, &mut rng);
        divergences += usize::from(t.divergent);
        accept_sum += t.accept_prob;
        state = t.state;
        samples.row_mut(s).copy_from_slice(&state.q);
    }
    Ok(ChainOutput {
        samples: SampleSet::new(samples, Provenance::Hmc),
        accept_rate: accept_sum / config.n_samples as f64,
        step,
        divergences,
    })
}

/// Runs `config.n_chains` chains from `inits` (one per chain), concurrently.
pub fn hmc_sample(target: &dyn LogDensity, inits: &[Vec<f64>], config: &HmcConfig) -> Result<ChainSet> {
    config.validate()?;
    check_len("hmc inits", config.n_chains, inits.len())?;
    for init in inits {
        check_len("hmc init dimension", target.dim(), init.len())?;
    }
    let root = RngStream::new(config.seed);
    let jobs: Vec<(usize, &Vec<f64>)> = inits.iter().enumerate().collect();
    let outs = par_map(&jobs, |(c, init)| run_chain(target, init, config, root.split(*c as u64)));
    let mut set = ChainSet {
        chains: Vec::new(),
        accept_rates: Vec::new(),
        step_sizes: Vec::new(),
        divergences: Vec::new(),
    };
    for out in outs {
        let out = out?;
        set.chains.push(out.samples);
        set.accept_rates.push(out.accept_rate);
        set.step_sizes.push(out.step);
        set.divergences.push(out.divergences);
    }
    Ok(set)
}

/// Chain starting points `μ + 0.1·L·ε` around a Gaussian approximation.
pub fn jittered_inits<R: Rng + ?Sized>(center: &GaussianPosterior, n_chains: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n_chains)
        .map(|_| {
            let z: Vec<f64> = standard_normal_vec(rng, center.dim()).iter().map(|v| 0.1 * v).collect();
            center.transform(&z)
        })
        .collect()
}

/// A target expressed in coordinates `z` with `θ = μ + L·z`.
pub struct Whitened<'a> {
    inner: &'a dyn LogDensity,
    frame: &'a GaussianPosterior,
}

impl<'a> Whitened<'a> {
    pub fn new(inner: &'a dyn LogDensity, frame: &'a GaussianPosterior) -> Result<Self> {
        check_len("whitening frame", inner.dim(), frame.dim())?;
        Ok(Self { inner, frame })
    }

    pub fn to_original(&self, z: &[f64]) -> Vec<f64> {
        self.frame.transform(z)
    }
}

impl LogDensity for Whitened<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    // the constant log|det L| is dropped
    fn log_density(&self, z: &[f64]) -> f64 {
        self.inner.log_density(&self.frame.transform(z))
    }

    fn log_density_and_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let (lp, g) = self.inner.log_density_and_grad(&self.frame.transform(z));
        (lp, self.frame.chol.lower_tr_matvec(&g))
    }
}

/// Split-R̂ per dimension: every chain is cut into two halves and the
/// between/within variance ratio is taken over the halves.
pub fn gelman_rubin(chains: &ChainSet) -> Result<Vec<f64>> {
    if chains.n_chains() < 2 {
        return Err(Error::InvalidArgument("R-hat needs at least 2 chains".into()));
    }
    let n = chains.len();
    if n < 10 {
        return Err(Error::InvalidArgument(format!("R-hat needs chains of length >= 10, got {n}")));
    }
    if chains.chains.iter().any(|c| c.len() != n || c.dim() != chains.dim()) {
        return Err(Error::InvalidArgument("chains differ in shape".into()));
    }
    let half = n / 2;
    let h = half as f64;
    Ok((0..chains.dim())
        .map(|j| {
            let mut means = Vec::new();
            let mut vars = Vec::new();
            for c in &chains.chains {
                let col: Vec<f64> = c.iter().map(|r| r[j]).collect();
                for part in [&col[..half], &col[n - half..]] {
                    means.push(mean(part));
                    vars.push(variance(part));
                }
            }
            let w = mean(&vars);
            if !(w > 0.0) {
                return f64::INFINITY;
            }
            let b = h * variance(&means);
            let var_plus = (h - 1.0) / h * w + b / h;
            (var_plus / w).sqrt()
        })
        .collect())
}

/// Errors if any R̂ reaches `threshold`.
pub fn check_convergence(rhat: &[f64], threshold: f64) -> Result<()> {
    let worst = rhat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(worst < threshold) {
        return Err(Error::NotConverged { rhat: worst, threshold });
    }
    Ok(())
}
