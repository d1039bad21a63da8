//! Parametric output functions `f_θ(x)`: the last-layer linear model and a
//! small fully-connected network with hand-written backpropagation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::likelihood::Likelihood;
use crate::models::data::Dataset;
use crate::numeric::sum::dot;
use crate::numeric::Matrix;

/// A differentiable map from inputs to output logits, parameterized by a flat vector.
pub trait Network: Send + Sync {
    fn n_params(&self) -> usize;
    fn n_inputs(&self) -> usize;
    fn n_outputs(&self) -> usize;

    /// Writes `f_θ(x)` into `out`.
    fn forward(&self, theta: &[f64], x: &[f64], out: &mut [f64]);

    /// Adds `∂(upstream · f_θ(x)) / ∂θ` into `grad`.
    fn accumulate_vjp(&self, theta: &[f64], x: &[f64], upstream: &[f64], grad: &mut [f64]);

    /// `C × d` Jacobian of the outputs with respect to θ.
    fn output_jacobian(&self, theta: &[f64], x: &[f64]) -> Matrix {
        let c = self.n_outputs();
        let mut jac = Matrix::zeros(c, self.n_params());
        let mut e = vec![0.0; c];
        for k in 0..c {
            e[k] = 1.0;
            self.accumulate_vjp(theta, x, &e, jac.row_mut(k));
            e[k] = 0.0;
        }
        jac
    }

    /// Exact negative Hessian of the log-likelihood when the model admits a
    /// closed form (the generalized Gauss-Newton is exact for models linear in θ).
    fn neg_hessian_log_likelihood(
        &self,
        _lik: &Likelihood,
        _theta: &[f64],
        _data: &Dataset,
    ) -> Option<Matrix> {
        None
    }

    fn predict(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_outputs()];
        self.forward(theta, x, &mut out);
        out
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: self.n_params(),
                found: theta.len(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(())
    }
}

/// Linear logits `W·x̃` with `x̃ = [x, 1]` when a bias is included.
///
/// Parameters are class-major: row `k` of `W` occupies
/// `θ[k·(P+1) .. (k+1)·(P+1)]` with the bias last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftmaxLinearModel {
    pub n_features: usize,
    pub n_outputs: usize,
    pub bias: bool,
}

impl SoftmaxLinearModel {
    pub fn new(n_features: usize, n_outputs: usize, bias: bool) -> Self {
        Self {
            n_features,
            n_outputs,
            bias,
        }
    }

    /// Width of one class block.
    pub fn block(&self) -> usize {
        self.n_features + usize::from(self.bias)
    }
}

impl Network for SoftmaxLinearModel {
    fn n_params(&self) -> usize {
        self.n_outputs * self.block()
    }

    fn n_inputs(&self) -> usize {
        self.n_features
    }

    fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    fn forward(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        let b = self.block();
        let p = self.n_features;
        for (k, o) in out.iter_mut().enumerate() {
            let w = &theta[k * b..(k + 1) * b];
            *o = dot(&w[..p], x) + if self.bias { w[p] } else { 0.0 };
        }
    }

    fn accumulate_vjp(&self, _theta: &[f64], x: &[f64], upstream: &[f64], grad: &mut [f64]) {
        let b = self.block();
        let p = self.n_features;
        for (k, &u) in upstream.iter().enumerate() {
            if u == 0.0 {
                continue;
            }
            let g = &mut grad[k * b..(k + 1) * b];
            for (gj, &xj) in g[..p].iter_mut().zip(x) {
                *gj += u * xj;
            }
            if self.bias {
                g[p] += u;
            }
        }
    }

    fn neg_hessian_log_likelihood(
        &self,
        lik: &Likelihood,
        theta: &[f64],
        data: &Dataset,
    ) -> Option<Matrix> {
        let b = self.block();
        let c = self.n_outputs;
        let d = self.n_params();
        let mut h = Matrix::zeros(d, d);
        let mut f = vec![0.0; c];
        let mut xt = vec![1.0; b];
        for i in 0..data.len() {
            let x = data.x.row(i);
            xt[..self.n_features].copy_from_slice(x);
            self.forward(theta, x, &mut f);
            let bmat = lik.neg_hessian_f(&f);
            for k in 0..c {
                for l in 0..=k {
                    let w = bmat[(k, l)];
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..b {
                        let a = w * xt[j];
                        let row = &mut h.row_mut(k * b + j)[l * b..l * b + b];
                        // within an off-diagonal block all (j, j') are needed;
                        // within a diagonal block only j' ≤ j
                        let upto = if k == l { j + 1 } else { b };
                        for (hv, &xv) in row[..upto].iter_mut().zip(&xt[..upto]) {
                            *hv += a * xv;
                        }
                    }
                }
            }
        }
        // mirror: diagonal blocks lower→upper, off-diagonal blocks (k,l)→(l,k)
        for r in 0..d {
            for s in 0..r {
                let (kr, ks) = (r / b, s / b);
                if kr == ks {
                    h[(s, r)] = h[(r, s)];
                }
            }
        }
        for k in 0..c {
            for l in 0..k {
                for j in 0..b {
                    for jj in 0..b {
                        h[(l * b + jj, k * b + j)] = h[(k * b + j, l * b + jj)];
                    }
                }
            }
        }
        Some(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation value `a = act(z)`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected network with `activation` on every hidden layer and a
/// linear output layer.
///
/// Parameters, layer by layer: weights `(n_out × n_in)` row-major, then the
/// `n_out` biases when enabled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyMlp {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub bias: bool,
}

impl TinyMlp {
    pub fn new(widths: Vec<usize>, activation: Activation, bias: bool) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "invalid layer widths {widths:?}"
            )));
        }
        Ok(Self {
            widths,
            activation,
            bias,
        })
    }

    pub fn tanh(widths: Vec<usize>) -> Result<Self> {
        Self::new(widths, Activation::Tanh, true)
    }

    fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Offset of layer `l`'s weights and the layer's `(n_in, n_out)`.
    fn layer_offsets(&self) -> Vec<(usize, usize, usize)> {
        let mut off = 0;
        (0..self.n_layers())
            .map(|l| {
                let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
                let here = off;
                off += n_out * n_in + if self.bias { n_out } else { 0 };
                (here, n_in, n_out)
            })
            .collect()
    }

    /// Post-activation values of every layer, input included.
    fn activations(&self, theta: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.layer_offsets();
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_vec());
        for (l, &(off, n_in, n_out)) in layers.iter().enumerate() {
            let prev = &acts[l];
            let w = &theta[off..off + n_out * n_in];
            let last = l + 1 == layers.len();
            let next: Vec<f64> = (0..n_out)
                .map(|o| {
                    let mut z = dot(&w[o * n_in..(o + 1) * n_in], prev);
                    if self.bias {
                        z += theta[off + n_out * n_in + o];
                    }
                    if last {
                        z
                    } else {
                        self.activation.apply(z)
                    }
                })
                .collect();
            acts.push(next);
        }
        acts
    }
}

impl Network for TinyMlp {
    fn n_params(&self) -> usize {
        self.layer_offsets()
            .last()
            .map(|&(off, n_in, n_out)| off + n_out * n_in + if self.bias { n_out } else { 0 })
            .unwrap_or(0)
    }

    fn n_inputs(&self) -> usize {
        self.widths[0]
    }

    fn n_outputs(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    fn forward(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        let acts = self.activations(theta, x);
        out.copy_from_slice(acts.last().expect("output layer"));
    }

    fn accumulate_vjp(&self, theta: &[f64], x: &[f64], upstream: &[f64], grad: &mut [f64]) {
        let layers = self.layer_offsets();
        let acts = self.activations(theta, x);
        // delta = ∂(upstream·f)/∂z for the current layer's pre-activations
        let mut delta = upstream.to_vec();
        for l in (0..layers.len()).rev() {
            let (off, n_in, n_out) = layers[l];
            let input = &acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    for (g, &a) in grad[off + o * n_in..off + (o + 1) * n_in].iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
                if self.bias {
                    grad[off + n_out * n_in + o] += d;
                }
            }
            if l > 0 {
                let w = &theta[off..off + n_out * n_in];
                let mut prev = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    if d != 0.0 {
                        for (p, &wv) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                            *p += d * wv;
                        }
                    }
                }
                for (p, &a) in prev.iter_mut().zip(input) {
                    *p *= self.activation.derivative_from_output(a);
                }
                delta = prev;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_jacobian, rel_error, RngStream};
    use rand::Rng;

    fn random_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut g = RngStream::new(seed).generator();
        (0..n).map(|_| g.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn linear_single_output_jacobian_is_augmented_input() {
        let m = SoftmaxLinearModel::new(2, 1, true);
        let j = m.output_jacobian(&[0.3, -0.2, 0.1], &[1.5, -2.0]);
        assert_eq!(j.row(0), &[1.5, -2.0, 1.0]);
    }

    #[test]
    fn linear_model_is_linear_in_theta() {
        let m = SoftmaxLinearModel::new(3, 4, true);
        let t1 = random_vec(1, m.n_params());
        let t2 = random_vec(2, m.n_params());
        let x = random_vec(3, 3);
        let (a, b) = (0.7, -1.3);
        let mix: Vec<f64> = t1.iter().zip(&t2).map(|(u, v)| a * u + b * v).collect();
        let lhs = m.predict(&mix, &x);
        let (f1, f2) = (m.predict(&t1, &x), m.predict(&t2, &x));
        for k in 0..4 {
            assert!((lhs[k] - (a * f1[k] + b * f2[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_tanh_net_outputs_bias() {
        let net = TinyMlp::new(vec![2, 5, 1], Activation::Tanh, false).unwrap();
        let theta = vec![0.0; net.n_params()];
        assert_eq!(net.predict(&theta, &[3.0, -1.0]), vec![0.0]);

        let net = TinyMlp::tanh(vec![2, 5, 1]).unwrap();
        let mut theta = vec![0.0; net.n_params()];
        *theta.last_mut().unwrap() = 0.25;
        assert_eq!(net.predict(&theta, &[3.0, -1.0]), vec![0.25]);
    }

    #[test]
    fn mlp_param_count() {
        let net = TinyMlp::tanh(vec![1, 20, 20, 1]).unwrap();
        assert_eq!(net.n_params(), 20 + 20 + 400 + 20 + 20 + 1);
    }

    #[test]
    fn mlp_jacobian_matches_finite_differences() {
        let net = TinyMlp::tanh(vec![2, 6, 5, 3]).unwrap();
        assert!(net.n_params() <= 100);
        let theta = random_vec(5, net.n_params());
        let x = [0.4, -0.9];
        let j = net.output_jacobian(&theta, &x);
        let fd = finite_diff_jacobian(|t| net.predict(t, &x), &theta, 1e-6).unwrap();
        assert!(rel_error(j.data(), fd.data(), 1e-3) < 1e-5);
    }

    #[test]
    fn identity_activation_single_layer_matches_linear_model() {
        let (p, c) = (3, 4);
        let lin = SoftmaxLinearModel::new(p, c, true);
        let net = TinyMlp::new(vec![p, c], Activation::Identity, true).unwrap();
        let theta_lin = random_vec(8, lin.n_params());
        // remap class-major [w_k, b_k] blocks into [W row-major, b]
        let mut theta_net = vec![0.0; net.n_params()];
        for k in 0..c {
            for j in 0..p {
                theta_net[k * p + j] = theta_lin[k * (p + 1) + j];
            }
            theta_net[c * p + k] = theta_lin[k * (p + 1) + p];
        }
        for seed in 0..5 {
            let x = random_vec(100 + seed, p);
            let a = lin.predict(&theta_lin, &x);
            let b = net.predict(&theta_net, &x);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_inputs_give_identical_jacobians() {
        let net = TinyMlp::tanh(vec![2, 4, 2]).unwrap();
        let theta = random_vec(3, net.n_params());
        let x = [0.1, 0.2];
        assert_eq!(net.output_jacobian(&theta, &x), net.output_jacobian(&theta, &x));
    }
}
