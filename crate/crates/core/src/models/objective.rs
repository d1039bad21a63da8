//! Log-likelihood, isotropic Gaussian prior, and their sum (the unnormalized
//! log posterior), each with an analytic gradient.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::models::data::Dataset;
use crate::models::likelihood::Likelihood;
use crate::models::network::Network;
use crate::numeric::sum::{dot, pairwise_sum};

/// An unnormalized log density over `R^d` with its gradient.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, theta: &[f64]) -> f64;
    fn log_density_and_grad(&self, theta: &[f64]) -> (f64, Vec<f64>);
}

fn check_inputs(net: &dyn Network, lik: &Likelihood, theta: &[f64], data: &Dataset) -> Result<()> {
    net.check_theta(theta)?;
    lik.check_data(data)?;
    if !data.is_empty() {
        check_len("dataset features", net.n_inputs(), data.n_features())?;
        check_len(
            "network outputs",
            lik.n_outputs(data.n_classes),
            net.n_outputs(),
        )?;
    }
    Ok(())
}

/// `Σᵢ log p(yᵢ | f_θ(xᵢ))`.
pub fn log_likelihood(
    net: &dyn Network,
    lik: &Likelihood,
    theta: &[f64],
    data: &Dataset,
) -> Result<f64> {
    check_inputs(net, lik, theta, data)?;
    Ok(log_likelihood_unchecked(net, lik, theta, data))
}

fn log_likelihood_unchecked(
    net: &dyn Network,
    lik: &Likelihood,
    theta: &[f64],
    data: &Dataset,
) -> f64 {
    let mut f = vec![0.0; net.n_outputs()];
    let terms: Vec<f64> = (0..data.len())
        .map(|i| {
            net.forward(theta, data.x.row(i), &mut f);
            lik.log_prob(&f, data, i)
        })
        .collect();
    pairwise_sum(&terms)
}

fn log_likelihood_and_grad_unchecked(
    net: &dyn Network,
    lik: &Likelihood,
    theta: &[f64],
    data: &Dataset,
) -> (f64, Vec<f64>) {
    let mut f = vec![0.0; net.n_outputs()];
    let mut g = vec![0.0; net.n_outputs()];
    let mut grad = vec![0.0; net.n_params()];
    let mut terms = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let x = data.x.row(i);
        net.forward(theta, x, &mut f);
        terms.push(lik.log_prob(&f, data, i));
        lik.grad_f(&f, data, i, &mut g);
        net.accumulate_vjp(theta, x, &g, &mut grad);
    }
    (pairwise_sum(&terms), grad)
}

pub fn grad_log_likelihood(
    net: &dyn Network,
    lik: &Likelihood,
    theta: &[f64],
    data: &Dataset,
) -> Result<Vec<f64>> {
    check_inputs(net, lik, theta, data)?;
    Ok(log_likelihood_and_grad_unchecked(net, lik, theta, data).1)
}

fn check_precision(precision: f64) -> Result<()> {
    if precision > 0.0 && precision.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "prior precision {precision} must be positive"
        )))
    }
}

/// `log N(θ | 0, λ⁻¹ I)`.
pub fn log_prior(theta: &[f64], precision: f64) -> Result<f64> {
    check_precision(precision)?;
    let d = theta.len() as f64;
    Ok(0.5 * d * (precision / (2.0 * PI)).ln() - 0.5 * precision * dot(theta, theta))
}

/// `−λθ`.
pub fn grad_log_prior(theta: &[f64], precision: f64) -> Result<Vec<f64>> {
    check_precision(precision)?;
    Ok(theta.iter().map(|t| -precision * t).collect())
}

pub fn log_joint(
    net: &dyn Network,
    lik: &Likelihood,
    theta: &[f64],
    data: &Dataset,
    precision: f64,
) -> Result<f64> {
    Ok(log_likelihood(net, lik, theta, data)? + log_prior(theta, precision)?)
}

pub fn grad_log_joint(
    net: &dyn Network,
    lik: &Likelihood,
    theta: &[f64],
    data: &Dataset,
    precision: f64,
) -> Result<Vec<f64>> {
    let mut g = grad_log_likelihood(net, lik, theta, data)?;
    for (gi, pi) in g.iter_mut().zip(grad_log_prior(theta, precision)?) {
        *gi += pi;
    }
    Ok(g)
}

/// The unnormalized log posterior `log p(D | θ) + log p(θ)` as a [`LogDensity`].
#[derive(Clone, Copy)]
pub struct LogJoint<'a> {
    pub net: &'a dyn Network,
    pub lik: &'a Likelihood,
    pub data: &'a Dataset,
    pub precision: f64,
}

impl<'a> LogJoint<'a> {
    /// Validates dimensions once so the hot-path evaluations can skip checks.
    pub fn new(
        net: &'a dyn Network,
        lik: &'a Likelihood,
        data: &'a Dataset,
        precision: f64,
    ) -> Result<Self> {
        check_precision(precision)?;
        check_inputs(net, lik, &vec![0.0; net.n_params()], data)?;
        Ok(Self {
            net,
            lik,
            data,
            precision,
        })
    }

    fn prior_terms(&self, theta: &[f64]) -> f64 {
        let d = theta.len() as f64;
        0.5 * d * (self.precision / (2.0 * PI)).ln() - 0.5 * self.precision * dot(theta, theta)
    }
}

impl LogDensity for LogJoint<'_> {
    fn dim(&self) -> usize {
        self.net.n_params()
    }

    fn log_density(&self, theta: &[f64]) -> f64 {
        if theta.iter().any(|v| !v.is_finite()) {
            return f64::NAN;
        }
        log_likelihood_unchecked(self.net, self.lik, theta, self.data) + self.prior_terms(theta)
    }

    fn log_density_and_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        if theta.iter().any(|v| !v.is_finite()) {
            return (f64::NAN, vec![f64::NAN; theta.len()]);
        }
        let (ll, mut g) = log_likelihood_and_grad_unchecked(self.net, self.lik, theta, self.data);
        for (gi, t) in g.iter_mut().zip(theta) {
            *gi -= self.precision * t;
        }
        (ll + self.prior_terms(theta), g)
    }
}

/// Draws unbiased minibatch estimates of a [`LogJoint`]:
/// `(N/B)·Σ_{i∈batch} log p(yᵢ | θ) + log p(θ)` with batches sampled without replacement.
#[derive(Clone, Copy)]
pub struct Minibatcher<'a> {
    pub full: LogJoint<'a>,
    pub batch_size: usize,
}

impl<'a> Minibatcher<'a> {
    pub fn new(full: LogJoint<'a>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(Self { full, batch_size: batch_size.min(full.data.len().max(1)) })
    }

    /// Batches needed to visit the data once.
    pub fn steps_per_epoch(&self) -> usize {
        self.full.data.len().div_ceil(self.batch_size).max(1)
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> BatchLogJoint<'a> {
        let n = self.full.data.len();
        let b = self.batch_size.min(n);
        let mut idx = rand::seq::index::sample(rng, n, b).into_vec();
        idx.sort_unstable();
        BatchLogJoint {
            net: self.full.net,
            lik: self.full.lik,
            batch: self.full.data.subset(&idx),
            precision: self.full.precision,
            scale: if b == 0 { 0.0 } else { n as f64 / b as f64 },
        }
    }
}

/// One minibatch estimate of the log joint.
pub struct BatchLogJoint<'a> {
    net: &'a dyn Network,
    lik: &'a Likelihood,
    batch: Dataset,
    precision: f64,
    scale: f64,
}

impl BatchLogJoint<'_> {
    fn joint(&self) -> LogJoint<'_> {
        LogJoint { net: self.net, lik: self.lik, data: &self.batch, precision: self.precision }
    }
}

impl LogDensity for BatchLogJoint<'_> {
    fn dim(&self) -> usize {
        self.net.n_params()
    }

    fn log_density(&self, theta: &[f64]) -> f64 {
        if theta.iter().any(|v| !v.is_finite()) {
            return f64::NAN;
        }
        let j = self.joint();
        self.scale * log_likelihood_unchecked(self.net, self.lik, theta, &self.batch) + j.prior_terms(theta)
    }

    fn log_density_and_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        if theta.iter().any(|v| !v.is_finite()) {
            return (f64::NAN, vec![f64::NAN; theta.len()]);
        }
        let (ll, mut g) = log_likelihood_and_grad_unchecked(self.net, self.lik, theta, &self.batch);
        for (gi, t) in g.iter_mut().zip(theta) {
            *gi = self.scale * *gi - self.precision * t;
        }
        (self.scale * ll + self.joint().prior_terms(theta), g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::network::{SoftmaxLinearModel, TinyMlp};
    use crate::numeric::{finite_diff_grad, rel_error, Matrix, RngStream};
    use rand::Rng;

    fn random_classification(seed: u64, n: usize, p: usize, c: usize) -> Dataset {
        let mut g = RngStream::new(seed).generator();
        let x = Matrix::from_vec(n, p, (0..n * p).map(|_| g.random_range(-2.0..2.0)).collect())
            .unwrap();
        let y = (0..n).map(|_| g.random_range(0..c)).collect();
        Dataset::classification(x, y, c).unwrap()
    }

    fn random_vec(seed: u64, n: usize, scale: f64) -> Vec<f64> {
        let mut g = RngStream::new(seed).generator();
        (0..n).map(|_| g.random_range(-scale..scale)).collect()
    }

    #[test]
    fn uniform_predictions_binary() {
        let data = random_classification(0, 10, 3, 2);
        let m = SoftmaxLinearModel::new(3, 2, true);
        let ll = log_likelihood(&m, &Likelihood::Categorical, &[0.0; 8], &data).unwrap();
        assert!((ll - 10.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_zero_residual() {
        let x = Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let data = Dataset::regression(x, vec![2.0, 4.0, 6.0, 8.0]).unwrap();
        let m = SoftmaxLinearModel::new(1, 1, true);
        let sigma = 0.3;
        let ll = log_likelihood(&m, &Likelihood::Gaussian { sigma }, &[2.0, 0.0], &data).unwrap();
        let expect = 4.0 * (1.0 / (sigma * (2.0 * PI).sqrt())).ln();
        assert!((ll - expect).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_per_example_evaluation() {
        // independent route: explicit softmax probabilities, then log
        let data = random_classification(1, 5, 4, 3);
        let m = SoftmaxLinearModel::new(4, 3, true);
        let theta = random_vec(2, m.n_params(), 1.5);
        let mut direct = 0.0f64;
        for i in 0..5 {
            let f = m.predict(&theta, data.x.row(i));
            let z: f64 = f.iter().map(|v| v.exp()).sum();
            let y = data.labels().unwrap()[i];
            direct += (f[y].exp() / z).ln();
        }
        let ll = log_likelihood(&m, &Likelihood::Categorical, &theta, &data).unwrap();
        assert!((ll - direct).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance_of_logits() {
        let data = random_classification(4, 6, 2, 3);
        let m = SoftmaxLinearModel::new(2, 3, true);
        let mut theta = random_vec(5, m.n_params(), 1.0);
        let a = log_likelihood(&m, &Likelihood::Categorical, &theta, &data).unwrap();
        // adding c to every bias adds c to every logit
        for k in 0..3 {
            theta[k * 3 + 2] += 7.5;
        }
        let b = log_likelihood(&m, &Likelihood::Categorical, &theta, &data).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cases: Vec<(Likelihood, usize)> = vec![
            (Likelihood::Categorical, 4),
            (Likelihood::Bernoulli, 2),
        ];
        for (seed, (lik, c)) in cases.into_iter().enumerate() {
            let data = random_classification(10 + seed as u64, 12, 5, c);
            let m = SoftmaxLinearModel::new(5, lik.n_outputs(c), true);
            assert!(m.n_params() <= 30);
            let theta = random_vec(20 + seed as u64, m.n_params(), 1.0);
            let g = grad_log_likelihood(&m, &lik, &theta, &data).unwrap();
            let fd = finite_diff_grad(
                |t| log_likelihood(&m, &lik, t, &data).unwrap(),
                &theta,
                1e-5,
            )
            .unwrap();
            assert!(rel_error(&g, &fd, 1e-3) < 1e-5, "{lik:?}");
        }
    }

    #[test]
    fn saturated_softmax_has_vanishing_gradient() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![-1.0], vec![-3.0]]).unwrap();
        let data = Dataset::classification(x, vec![1, 1, 0, 0], 2).unwrap();
        let m = SoftmaxLinearModel::new(1, 2, false);
        let norm = |s: f64| {
            let g = grad_log_likelihood(&m, &Likelihood::Categorical, &[-s, s], &data).unwrap();
            g.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        assert!(norm(10.0) < norm(1.0));
        assert!(norm(50.0) < 1e-20);
    }

    #[test]
    fn symmetric_balanced_data_zero_bias_gradient() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, -2.0], vec![0.5, -0.3], vec![-0.5, 0.3]])
            .unwrap();
        let data = Dataset::classification(x, vec![1, 0, 1, 0], 2).unwrap();
        let m = SoftmaxLinearModel::new(2, 1, true);
        let g = grad_log_likelihood(&m, &Likelihood::Bernoulli, &[0.0; 3], &data).unwrap();
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn prior_values() {
        let lam: f64 = 2.0;
        let lp = log_prior(&[0.0; 3], lam).unwrap();
        assert!((lp - 1.5 * (lam / (2.0 * PI)).ln()).abs() < 1e-14);
        assert_eq!(grad_log_prior(&[1.0, -1.0], 2.0).unwrap(), vec![-2.0, 2.0]);
        assert!(log_prior(&[0.0], 0.0).is_err());
        let theta = random_vec(3, 4, 2.0);
        let fd = finite_diff_grad(|t| log_prior(t, 0.7).unwrap(), &theta, 1e-5).unwrap();
        assert!(rel_error(&grad_log_prior(&theta, 0.7).unwrap(), &fd, 1e-3) < 1e-6);
    }

    #[test]
    fn joint_is_sum_and_gradient_checks() {
        let data = random_classification(7, 9, 3, 3);
        let m = SoftmaxLinearModel::new(3, 3, true);
        let theta = random_vec(8, m.n_params(), 1.0);
        let lik = Likelihood::Categorical;
        let lj = log_joint(&m, &lik, &theta, &data, 1.3).unwrap();
        let parts = log_likelihood(&m, &lik, &theta, &data).unwrap() + log_prior(&theta, 1.3).unwrap();
        assert_eq!(lj, parts);
        let g = grad_log_joint(&m, &lik, &theta, &data, 1.3).unwrap();
        let fd = finite_diff_grad(|t| log_joint(&m, &lik, t, &data, 1.3).unwrap(), &theta, 1e-5)
            .unwrap();
        assert!(rel_error(&g, &fd, 1e-3) < 1e-5);
        let target = LogJoint::new(&m, &lik, &data, 1.3).unwrap();
        let (v, g2) = target.log_density_and_grad(&theta);
        assert!((v - lj).abs() < 1e-12);
        assert!(rel_error(&g2, &g, 1e-6) < 1e-14);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let net = TinyMlp::tanh(vec![1, 8, 1]).unwrap();
        let mut g = RngStream::new(30).generator();
        let x = Matrix::from_vec(15, 1, (0..15).map(|_| g.random_range(-3.0..3.0)).collect())
            .unwrap();
        let y = x.data().iter().map(|v| v.sin()).collect();
        let data = Dataset::regression(x, y).unwrap();
        let lik = Likelihood::Gaussian { sigma: 0.3 };
        let theta = random_vec(31, net.n_params(), 1.0);
        let grad = grad_log_joint(&net, &lik, &theta, &data, 0.5).unwrap();
        let fd = finite_diff_grad(|t| log_joint(&net, &lik, t, &data, 0.5).unwrap(), &theta, 1e-5)
            .unwrap();
        assert!(rel_error(&grad, &fd, 1e-2) < 1e-4);
    }

    #[test]
    fn dimension_errors() {
        let data = random_classification(0, 4, 3, 2);
        let m = SoftmaxLinearModel::new(3, 2, true);
        assert!(matches!(
            log_likelihood(&m, &Likelihood::Categorical, &[0.0; 5], &data),
            Err(Error::DimensionMismatch { .. })
        ));
        let wrong = SoftmaxLinearModel::new(2, 2, true);
        assert!(log_likelihood(&wrong, &Likelihood::Categorical, &[0.0; 6], &data).is_err());
        assert!(matches!(
            log_likelihood(&m, &Likelihood::Categorical, &[f64::NAN; 8], &data),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn minibatch_estimates_are_unbiased() {
        let data = random_classification(31, 40, 3, 4);
        let m = SoftmaxLinearModel::new(3, 4, true);
        let lik = Likelihood::Categorical;
        let full = LogJoint::new(&m, &lik, &data, 0.7).unwrap();
        let theta = random_vec(2, m.n_params(), 0.5);
        let whole = Minibatcher::new(full, 40).unwrap().draw(&mut RngStream::new(0).generator());
        let (v, g) = whole.log_density_and_grad(&theta);
        let (fv, fg) = full.log_density_and_grad(&theta);
        assert!((v - fv).abs() < 1e-9 && rel_error(&g, &fg, 1e-8) < 1e-12);

        let mb = Minibatcher::new(full, 8).unwrap();
        assert_eq!(mb.steps_per_epoch(), 5);
        let mut rng = RngStream::new(1).generator();
        let draws: Vec<f64> = (0..4000).map(|_| mb.draw(&mut rng).log_density(&theta)).collect();
        let mean = draws.iter().sum::<f64>() / 4000.0;
        let se = (crate::numeric::sum::variance(&draws) / 4000.0).sqrt();
        assert!((mean - fv).abs() < 3.0 * se, "{mean} vs {fv} (se {se})");

        let b = mb.draw(&mut rng);
        let fd = finite_diff_grad(|t| b.log_density(t), &theta, 1e-6).unwrap();
        assert!(rel_error(&b.log_density_and_grad(&theta).1, &fd, 1e-6) < 1e-6);
        assert!(Minibatcher::new(full, 0).is_err());
    }
}
