//! Radial normalizing-flow layers and stacks.
//!
//! A radial layer maps `z ↦ z + β·h(r)·(z − z₀)` with `h(r) = 1/(α + r)` and
//! `r = ‖z − z₀‖`. Its Jacobian has eigenvalue `1 + βh` with multiplicity
//! `d − 1` (tangential directions) and `1 + βh + βh′r` radially, so
//!
//! ```text
//! log|det J| = (d − 1)·log(1 + βh) + log(1 + βα/(α + r)²)
//! ```
//!
//! Invertibility needs `β ≥ −α`; it holds for all raw parameters because
//! `α = softplus(raw_α)` and `β = −α + softplus(raw_β)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};
use crate::laplace::GaussianPosterior;
use crate::numeric::sum::{dot, norm, sigmoid, softplus, softplus_inv};
use crate::numeric::{standard_normal_vec, Matrix, Provenance, SampleSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialLayer {
    pub z0: Vec<f64>,
    pub raw_alpha: f64,
    pub raw_beta: f64,
}

impl RadialLayer {
    /// A layer with the given center and constrained `(α, β)`; needs `α > 0`, `β > −α`.
    pub fn from_constrained(z0: Vec<f64>, alpha: f64, beta: f64) -> Self {
        Self {
            z0,
            raw_alpha: softplus_inv(alpha),
            raw_beta: softplus_inv(alpha + beta),
        }
    }

    /// `β = 0`, so the layer is exactly the identity.
    pub fn identity(z0: Vec<f64>, alpha: f64) -> Self {
        let raw_alpha = softplus_inv(alpha);
        Self {
            z0,
            raw_alpha,
            raw_beta: softplus_inv(softplus(raw_alpha)),
        }
    }

    pub fn dim(&self) -> usize {
        self.z0.len()
    }

    pub fn alpha(&self) -> f64 {
        softplus(self.raw_alpha)
    }

    pub fn beta(&self) -> f64 {
        -self.alpha() + softplus(self.raw_beta)
    }

    fn radius(&self, z: &[f64]) -> (Vec<f64>, f64) {
        let u: Vec<f64> = z.iter().zip(&self.z0).map(|(a, b)| a - b).collect();
        let r = norm(&u);
        (u, r)
    }

    fn log_det_at(&self, r: f64, alpha: f64, beta: f64) -> f64 {
        let d = self.dim() as f64;
        let s = alpha + r;
        // as r → 0 this tends to d·log(1 + β/α)
        (d - 1.0) * (beta / s).ln_1p() + (beta * alpha / (s * s)).ln_1p()
    }

    /// `(y, log|det ∂y/∂z|)`.
    pub fn forward(&self, z: &[f64]) -> (Vec<f64>, f64) {
        let (alpha, beta) = (self.alpha(), self.beta());
        let (u, r) = self.radius(z);
        let scale = beta / (alpha + r);
        let y = z.iter().zip(&u).map(|(zi, ui)| zi + scale * ui).collect();
        (y, self.log_det_at(r, alpha, beta))
    }

    pub fn log_det(&self, z: &[f64]) -> f64 {
        let (_, r) = self.radius(z);
        self.log_det_at(r, self.alpha(), self.beta())
    }

    /// Pre-image of `y`. The direction `y − z₀` is preserved, so only the
    /// radius is unknown: solve `r·(1 + β/(α + r)) = ‖y − z₀‖` by bisection.
    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        let (alpha, beta) = (self.alpha(), self.beta());
        let (v, rho) = self.radius(y);
        if rho == 0.0 {
            return self.z0.clone();
        }
        let g = |r: f64| r + beta * r / (alpha + r);
        let mut lo = 0.0f64;
        let mut hi = rho + beta.abs();
        while g(hi) < rho {
            hi *= 2.0;
        }
        // bisect until the bracket cannot shrink further (well below 1e-12)
        for _ in 0..2100 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if g(mid) < rho {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let r = 0.5 * (lo + hi);
        self.z0
            .iter()
            .zip(&v)
            .map(|(c, vi)| c + vi * (r / rho))
            .collect()
    }

    /// Reverse-mode pass. Given `∂L/∂y` and the scalar weight of this layer's
    /// log-determinant in `L`, adds parameter gradients (`[z₀…, raw_α, raw_β]`)
    /// into `gparams` and returns `∂L/∂z`.
    pub fn backward(&self, z: &[f64], gy: &[f64], g_ld: f64, gparams: &mut [f64]) -> Vec<f64> {
        let d = self.dim();
        let dm1 = (d - 1) as f64;
        let (alpha, beta) = (self.alpha(), self.beta());
        let (u, r) = self.radius(z);
        let s = alpha + r;
        let h = 1.0 / s;
        let a = 1.0 + beta * h;
        let b = 1.0 + beta * alpha / (s * s);
        let s2 = s * s;
        let s3 = s2 * s;

        let dld_dr = dm1 / a * (-beta / s2) + (-2.0 * beta * alpha / s3) / b;
        let dld_dbeta = dm1 / a * h + (alpha / s2) / b;
        let dld_dalpha = dm1 / a * (-beta / s2) + beta * (1.0 / s2 - 2.0 * alpha / s3) / b;

        let ug = dot(&u, gy);
        let radial = if r > 0.0 {
            (-beta / s2) * ug / r + g_ld * dld_dr / r
        } else {
            0.0
        };
        let gu: Vec<f64> = gy
            .iter()
            .zip(&u)
            .map(|(g, ui)| beta * h * g + radial * ui)
            .collect();

        let g_beta = h * ug + g_ld * dld_dbeta;
        let g_alpha = -beta / s2 * ug + g_ld * dld_dalpha;

        for (gp, gui) in gparams[..d].iter_mut().zip(&gu) {
            *gp -= gui;
        }
        gparams[d] += (g_alpha - g_beta) * sigmoid(self.raw_alpha);
        gparams[d + 1] += g_beta * sigmoid(self.raw_beta);

        gy.iter().zip(&gu).map(|(g, gui)| g + gui).collect()
    }
}

/// Composition `F = F_ℓ ∘ … ∘ F₁`; an empty stack is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialFlowStack {
    pub dim: usize,
    pub layers: Vec<RadialLayer>,
}

/// Inputs to every layer from one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
    pub log_det: f64,
}

impl RadialFlowStack {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            layers: Vec::new(),
        }
    }

    pub fn new(dim: usize, layers: Vec<RadialLayer>) -> Result<Self> {
        for l in &layers {
            check_len("radial layer center", dim, l.dim())?;
        }
        Ok(Self { dim, layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.layers.len() * (self.dim + 2)
    }

    /// Flattened raw parameters, layer by layer `[z₀…, raw_α, raw_β]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            p.extend_from_slice(&l.z0);
            p.push(l.raw_alpha);
            p.push(l.raw_beta);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_len("flow parameters", self.n_params(), p.len())?;
        let w = self.dim + 2;
        for (l, chunk) in self.layers.iter_mut().zip(p.chunks_exact(w)) {
            l.z0.copy_from_slice(&chunk[..self.dim]);
            l.raw_alpha = chunk[self.dim];
            l.raw_beta = chunk[self.dim + 1];
        }
        Ok(())
    }

    /// `(F(z), Σ log|det|)` with each layer's term evaluated at its own input.
    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_len("flow input", self.dim, z.len())?;
        let t = self.forward_trace(z);
        Ok((t.output, t.log_det))
    }

    pub fn forward_trace(&self, z: &[f64]) -> FlowTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = z.to_vec();
        let mut log_dets = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (y, ld) = l.forward(&cur);
            inputs.push(std::mem::replace(&mut cur, y));
            log_dets.push(ld);
        }
        FlowTrace {
            inputs,
            output: cur,
            log_det: log_dets.iter().sum(),
        }
    }

    /// Backpropagates `∂L/∂F(z)` and the weight `g_ld` of the total
    /// log-determinant; accumulates into `gparams` and returns `∂L/∂z`.
    pub fn backward(&self, trace: &FlowTrace, gy: &[f64], g_ld: f64, gparams: &mut [f64]) -> Vec<f64> {
        let w = self.dim + 2;
        let mut g = gy.to_vec();
        for (k, l) in self.layers.iter().enumerate().rev() {
            g = l.backward(&trace.inputs[k], &g, g_ld, &mut gparams[k * w..(k + 1) * w]);
        }
        g
    }

    /// `F⁻¹(y)` together with `Σ log|det J|` evaluated at the pre-images.
    pub fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_len("flow inverse input", self.dim, y.len())?;
        let mut cur = y.to_vec();
        let mut lds = Vec::with_capacity(self.layers.len());
        for l in self.layers.iter().rev() {
            cur = l.inverse(&cur);
            lds.push(l.log_det(&cur));
        }
        Ok((cur, lds.iter().sum()))
    }
}

/// Near-identity stack: centers at `μ + 0.1·L·ε`, `α = 1`, `β = 10⁻³`.
pub fn init_near_identity<R: Rng + ?Sized>(
    n_layers: usize,
    base: &GaussianPosterior,
    rng: &mut R,
) -> RadialFlowStack {
    let d = base.dim();
    let layers = (0..n_layers)
        .map(|_| {
            let eps: Vec<f64> = standard_normal_vec(rng, d).iter().map(|e| 0.1 * e).collect();
            RadialLayer::from_constrained(base.transform(&eps), 1.0, 1e-3)
        })
        .collect();
    RadialFlowStack { dim: d, layers }
}

/// A Gaussian base pushed through a radial flow.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedPosterior {
    pub base: GaussianPosterior,
    pub flow: RadialFlowStack,
}

impl RefinedPosterior {
    pub fn new(base: GaussianPosterior, flow: RadialFlowStack) -> Result<Self> {
        check_len("refined posterior", base.dim(), flow.dim)?;
        Ok(Self { base, flow })
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// `log q(F⁻¹(θ̃)) − Σ log|det J_F|` at the pre-images.
    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        let (z, ld) = self.flow.inverse(theta)?;
        Ok(self.base.log_density(&z) - ld)
    }

    /// Draws `n` samples together with their log densities under the refined
    /// posterior (computed through the forward pass, no inversion).
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (SampleSet, Vec<f64>) {
        let d = self.dim();
        let mut out = Matrix::zeros(n, d);
        let mut logq = Vec::with_capacity(n);
        for s in 0..n {
            let eps = standard_normal_vec(rng, d);
            let theta = self.base.transform(&eps);
            let t = self.flow.forward_trace(&theta);
            out.row_mut(s).copy_from_slice(&t.output);
            logq.push(self.base.log_density_from_noise(&eps) - t.log_det);
        }
        (SampleSet::new(out, Provenance::Refined), logq)
    }
}
