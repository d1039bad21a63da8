//! Posterior predictive approximations: Monte Carlo over parameter samples,
//! sampling the linearized output Gaussian, the binary probit and multi-class
//! probit closed forms, and a trapezoid reference for `∫ σ(f) N(f | m, s²) df`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::laplace::GaussianPosterior;
use crate::models::{Likelihood, Network};
use crate::numeric::sum::{dot, mean, pairwise_sum, sigmoid, softmax, variance};
use crate::numeric::{par_map, standard_normal_vec, Matrix, RngStream, SampleSet};

/// Probit variance scaling `π/8`.
const PROBIT_SCALE: f64 = PI / 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictiveMethod {
    Mc,
    LinearizedMc,
    Probit,
    Mpa,
    Quadrature,
}

/// `N × C` class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMatrix {
    pub probs: Matrix,
    pub method: PredictiveMethod,
    /// Number of draws behind a sampled predictive.
    pub s: Option<usize>,
    /// Per-entry Monte Carlo standard error for sampled predictives.
    pub se: Option<Matrix>,
}

impl PredictiveMatrix {
    /// Validates rows against the simplex (sum 1 within 1e-9, entries in [0, 1]).
    pub fn new(probs: Matrix, method: PredictiveMethod, s: Option<usize>) -> Result<Self> {
        for (i, row) in probs.iter_rows().enumerate() {
            let total = pairwise_sum(row);
            if (total - 1.0).abs() > 1e-9 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidArgument(format!("predictive row {i} is not a distribution")));
            }
        }
        Ok(Self { probs, method, s, se: None })
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn n_classes(&self) -> usize {
        self.probs.cols()
    }

    /// Max predicted probability per row.
    pub fn confidence(&self) -> Vec<f64> {
        self.probs.iter_rows().map(|r| r.iter().copied().fold(0.0, f64::max)).collect()
    }
}

/// Gaussian over the network outputs at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGaussian {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

/// Predictive mean and standard deviation for regression.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionPredictive {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn n_classes(lik: &Likelihood, net: &dyn Network) -> usize {
    match lik {
        Likelihood::Bernoulli => 2,
        _ => net.n_outputs(),
    }
}

fn check_classification(lik: &Likelihood) -> Result<()> {
    if lik.is_classification() {
        Ok(())
    } else {
        Err(Error::InvalidArgument("class predictive requested for a regression likelihood".into()))
    }
}

/// Averages plug-in class probabilities over the draws returned by `outputs(i)`
/// for each input row.
fn average_probs<F>(lik: &Likelihood, n: usize, c: usize, s: usize, outputs: F) -> (Matrix, Matrix)
where
    F: Fn(usize) -> Vec<Vec<f64>> + Sync,
{
    let rows: Vec<usize> = (0..n).collect();
    let per_row = par_map(&rows, |&i| {
        let probs: Vec<Vec<f64>> = outputs(i).iter().map(|f| lik.probs(f)).collect();
        let mut m = vec![0.0; c];
        let mut se = vec![0.0; c];
        for k in 0..c {
            let col: Vec<f64> = probs.iter().map(|p| p[k]).collect();
            m[k] = pairwise_sum(&col) / s as f64;
            se[k] = if s > 1 { (variance(&col) / s as f64).sqrt() } else { 0.0 };
        }
        (m, se)
    });
    let mut probs = Matrix::zeros(n, c);
    let mut se = Matrix::zeros(n, c);
    for (i, (m, e)) in per_row.into_iter().enumerate() {
        probs.row_mut(i).copy_from_slice(&m);
        se.row_mut(i).copy_from_slice(&e);
    }
    (probs, se)
}

/// `(1/S) Σ_s p(y | f_{θ_s}(x))` per input row.
pub fn mc_predictive(samples: &SampleSet, net: &dyn Network, lik: &Likelihood, x: &Matrix) -> Result<PredictiveMatrix> {
    check_classification(lik)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty sample set".into()));
    }
    check_len("mc_predictive samples", net.n_params(), samples.dim())?;
    check_len("mc_predictive inputs", net.n_inputs(), x.cols())?;
    let s = samples.len();
    let (probs, se) = average_probs(lik, x.rows(), n_classes(lik, net), s, |i| {
        samples.iter().map(|th| net.predict(th, x.row(i))).collect()
    });
    let mut out = PredictiveMatrix::new(probs, PredictiveMethod::Mc, Some(s))?;
    out.se = Some(se);
    Ok(out)
}

/// Plug-in probabilities at a single parameter vector.
pub fn plugin_predictive(theta: &[f64], net: &dyn Network, lik: &Likelihood, x: &Matrix) -> Result<PredictiveMatrix> {
    check_classification(lik)?;
    net.check_theta(theta)?;
    check_len("plugin inputs", net.n_inputs(), x.cols())?;
    let c = n_classes(lik, net);
    let mut probs = Matrix::zeros(x.rows(), c);
    for (i, row) in x.iter_rows().enumerate() {
        probs.row_mut(i).copy_from_slice(&lik.probs(&net.predict(theta, row)));
    }
    PredictiveMatrix::new(probs, PredictiveMethod::Mc, Some(1))
}

/// Mixture mean and standard deviation (epistemic plus observation noise).
pub fn mc_regression(samples: &SampleSet, net: &dyn Network, sigma: f64, x: &Matrix) -> Result<RegressionPredictive> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty sample set".into()));
    }
    check_len("mc_regression samples", net.n_params(), samples.dim())?;
    let rows: Vec<usize> = (0..x.rows()).collect();
    let per_row = par_map(&rows, |&i| {
        let f: Vec<f64> = samples.iter().map(|th| net.predict(th, x.row(i))[0]).collect();
        let m = mean(&f);
        let second = pairwise_sum(&f.iter().map(|v| (v - m) * (v - m)).collect::<Vec<_>>()) / f.len() as f64;
        (m, (second + sigma * sigma).sqrt())
    });
    Ok(RegressionPredictive {
        mean: per_row.iter().map(|p| p.0).collect(),
        std: per_row.iter().map(|p| p.1).collect(),
    })
}

/// `J·L` at the posterior mean, with `J` the output Jacobian and `L·Lᵀ = Σ`.
fn output_factor(post: &GaussianPosterior, net: &dyn Network, x: &[f64]) -> Matrix {
    let jac = net.output_jacobian(&post.mean, x);
    let d = post.dim();
    let mut m = Matrix::zeros(jac.rows(), d);
    for k in 0..jac.rows() {
        let jr = jac.row(k);
        let mr = m.row_mut(k);
        for i in 0..d {
            let a = jr[i];
            if a == 0.0 {
                continue;
            }
            for (j, l) in post.chol.row(i)[..=i].iter().enumerate() {
                mr[j] += a * l;
            }
        }
    }
    m
}

/// First-order output distribution `N(f_μ(x), J Σ Jᵀ)`.
pub fn linearized_output(post: &GaussianPosterior, net: &dyn Network, x: &[f64]) -> Result<OutputGaussian> {
    check_len("linearized posterior", net.n_params(), post.dim())?;
    check_len("linearized input", net.n_inputs(), x.len())?;
    let m = output_factor(post, net, x);
    let c = m.rows();
    let mut cov = Matrix::zeros(c, c);
    for a in 0..c {
        for b in 0..=a {
            let v = dot(m.row(a), m.row(b));
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok(OutputGaussian { mean: net.predict(&post.mean, x), cov })
}

/// Averages plug-in probabilities over `S` draws `f ~ N(f_μ(x), J Σ Jᵀ)`.
pub fn linearized_mc_predictive(
    post: &GaussianPosterior,
    net: &dyn Network,
    lik: &Likelihood,
    x: &Matrix,
    s: usize,
    stream: RngStream,
) -> Result<PredictiveMatrix> {
    check_classification(lik)?;
    check_len("linearized posterior", net.n_params(), post.dim())?;
    check_len("linearized inputs", net.n_inputs(), x.cols())?;
    if s == 0 {
        return Err(Error::InvalidArgument("zero draws".into()));
    }
    let d = post.dim();
    let (probs, se) = average_probs(lik, x.rows(), n_classes(lik, net), s, |i| {
        let m = output_factor(post, net, x.row(i));
        let mu = net.predict(&post.mean, x.row(i));
        let mut rng = stream.split(i as u64).generator();
        (0..s)
            .map(|_| {
                let z = standard_normal_vec(&mut rng, d);
                mu.iter().enumerate().map(|(k, f)| f + dot(m.row(k), &z)).collect()
            })
            .collect()
    });
    let mut out = PredictiveMatrix::new(probs, PredictiveMethod::LinearizedMc, Some(s))?;
    out.se = Some(se);
    Ok(out)
}

/// Linearized regression predictive: mean `f_μ(x)`, variance `J Σ Jᵀ + σ²`.
pub fn linearized_regression(post: &GaussianPosterior, net: &dyn Network, sigma: f64, x: &Matrix) -> Result<RegressionPredictive> {
    let mut out = RegressionPredictive { mean: Vec::new(), std: Vec::new() };
    for row in x.iter_rows() {
        let g = linearized_output(post, net, row)?;
        out.mean.push(g.mean[0]);
        out.std.push((g.cov[(0, 0)] + sigma * sigma).sqrt());
    }
    Ok(out)
}

/// `σ(m / √(1 + π s² / 8))`.
pub fn probit_binary(m: f64, s2: f64) -> f64 {
    sigmoid(m / (1.0 + PROBIT_SCALE * s2.max(0.0)).sqrt())
}

/// Multi-class probit: softmax of the per-class probit-scaled means,
/// ignoring output covariances.
pub fn mpa(f_mean: &[f64], s_diag: &[f64]) -> Vec<f64> {
    let scaled: Vec<f64> = f_mean
        .iter()
        .zip(s_diag)
        .map(|(m, s)| m / (1.0 + PROBIT_SCALE * s.max(0.0)).sqrt())
        .collect();
    softmax(&scaled)
}

/// Closed-form predictive from the linearized output: probit for a single
/// Bernoulli output, MPA otherwise.
pub fn analytic_predictive(post: &GaussianPosterior, net: &dyn Network, lik: &Likelihood, x: &Matrix) -> Result<PredictiveMatrix> {
    check_classification(lik)?;
    let c = n_classes(lik, net);
    let mut probs = Matrix::zeros(x.rows(), c);
    for (i, row) in x.iter_rows().enumerate() {
        let g = linearized_output(post, net, row)?;
        let p = match lik {
            Likelihood::Bernoulli => {
                let q = probit_binary(g.mean[0], g.cov[(0, 0)]);
                vec![1.0 - q, q]
            }
            _ => mpa(&g.mean, &g.cov.diag()),
        };
        probs.row_mut(i).copy_from_slice(&p);
    }
    let method = if matches!(lik, Likelihood::Bernoulli) { PredictiveMethod::Probit } else { PredictiveMethod::Mpa };
    PredictiveMatrix::new(probs, method, None)
}

/// Trapezoid rule for `∫ σ(f) N(f | m, s²) df` over `[m − 10s, m + 10s]`.
pub fn logistic_gaussian_quadrature(m: f64, s: f64, n_points: usize) -> Result<f64> {
    if !(s > 0.0) || n_points < 2 {
        return Err(Error::InvalidArgument(format!("quadrature needs s > 0 and >= 2 points (s={s}, n={n_points})")));
    }
    let lo = m - 10.0 * s;
    let h = 20.0 * s / (n_points - 1) as f64;
    let norm = 1.0 / (s * (2.0 * PI).sqrt());
    let vals: Vec<f64> = (0..n_points)
        .map(|k| {
            let f = lo + k as f64 * h;
            let u = (f - m) / s;
            let w = if k == 0 || k + 1 == n_points { 0.5 } else { 1.0 };
            w * sigmoid(f) * norm * (-0.5 * u * u).exp()
        })
        .collect();
    Ok(h * pairwise_sum(&vals))
}

/// `(1/S) Σ σ(m + s·z_i)` with standard-normal `z_i`.
pub fn mc_logistic_gaussian<R: Rng + ?Sized>(m: f64, s: f64, n: usize, rng: &mut R) -> f64 {
    let vals: Vec<f64> = standard_normal_vec(rng, n).into_iter().map(|z| sigmoid(m + s * z)).collect();
    pairwise_sum(&vals) / n as f64
}

/// Evenly spaced grid including both ends.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

/// Absolute-error surfaces over an `(m, s)` grid, rows indexed by `m`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorGrid {
    pub m_values: Vec<f64>,
    pub s_values: Vec<f64>,
    pub n_samples: usize,
    pub n_repeats: usize,
    pub reference: Matrix,
    /// MC error averaged over repeats.
    pub mc_mean: Matrix,
    /// Largest MC error among repeats.
    pub mc_max: Matrix,
    pub probit: Matrix,
}

/// Value and `(m, s)` location of a surface maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMax {
    pub value: f64,
    pub m: f64,
    pub s: f64,
}

impl ErrorGrid {
    fn argmax(&self, surface: &Matrix) -> GridMax {
        let mut best = GridMax { value: f64::NEG_INFINITY, m: f64::NAN, s: f64::NAN };
        for (i, m) in self.m_values.iter().enumerate() {
            for (j, s) in self.s_values.iter().enumerate() {
                let v = surface[(i, j)];
                if v > best.value {
                    best = GridMax { value: v, m: *m, s: *s };
                }
            }
        }
        best
    }

    /// Largest single-run MC error over the grid.
    pub fn max_mc_error(&self) -> GridMax {
        self.argmax(&self.mc_max)
    }

    /// Largest repeat-averaged MC error over the grid.
    pub fn max_mean_mc_error(&self) -> GridMax {
        self.argmax(&self.mc_mean)
    }

    pub fn max_probit_error(&self) -> GridMax {
        self.argmax(&self.probit)
    }
}

/// MC (with `n_samples` draws, `n_repeats` independent runs per cell) and
/// probit errors against the quadrature reference over an `(m, s)` grid.
pub fn mc_error_grid(m_grid: &[f64], s_grid: &[f64], n_samples: usize, n_repeats: usize, stream: RngStream) -> Result<ErrorGrid> {
    if m_grid.is_empty() || s_grid.is_empty() {
        return Err(Error::InvalidArgument("empty error grid".into()));
    }
    if n_samples == 0 || n_repeats == 0 {
        return Err(Error::InvalidArgument("error grid needs positive samples and repeats".into()));
    }
    if s_grid.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidArgument("error grid s values must be positive".into()));
    }
    let cells: Vec<(usize, usize)> = (0..m_grid.len()).flat_map(|i| (0..s_grid.len()).map(move |j| (i, j))).collect();
    let ns = s_grid.len();
    let results = par_map(&cells, |&(i, j)| -> Result<[f64; 4]> {
        let (m, s) = (m_grid[i], s_grid[j]);
        let reference = logistic_gaussian_quadrature(m, s, 20_000)?;
        let mut rng = stream.split((i * ns + j) as u64).generator();
        let errs: Vec<f64> = (0..n_repeats)
            .map(|_| (mc_logistic_gaussian(m, s, n_samples, &mut rng) - reference).abs())
            .collect();
        let probit = (probit_binary(m, s * s) - reference).abs();
        Ok([reference, mean(&errs), errs.iter().copied().fold(0.0, f64::max), probit])
    });
    let (nm, ns) = (m_grid.len(), s_grid.len());
    let mut grid = ErrorGrid {
        m_values: m_grid.to_vec(),
        s_values: s_grid.to_vec(),
        n_samples,
        n_repeats,
        reference: Matrix::zeros(nm, ns),
        mc_mean: Matrix::zeros(nm, ns),
        mc_max: Matrix::zeros(nm, ns),
        probit: Matrix::zeros(nm, ns),
    };
    for (&(i, j), r) in cells.iter().zip(results) {
        let [reference, mc_mean, mc_max, probit] = r?;
        grid.reference[(i, j)] = reference;
        grid.mc_mean[(i, j)] = mc_mean;
        grid.mc_max[(i, j)] = mc_max;
        grid.probit[(i, j)] = probit;
    }
    Ok(grid)
}

/// Empirical standard deviation of the MC estimate at `(m, s)` over
/// `n_repeats` runs for each draw count in `s_list`.
pub fn mc_error_scaling(m: f64, s: f64, s_list: &[usize], n_repeats: usize, stream: RngStream) -> Result<Vec<(usize, f64)>> {
    if s_list.windows(2).any(|w| w[1] <= w[0]) || s_list.first() == Some(&0) {
        return Err(Error::InvalidArgument("draw counts must be positive and increasing".into()));
    }
    if n_repeats < 2 {
        return Err(Error::InvalidArgument("standard error needs at least 2 repeats".into()));
    }
    let jobs: Vec<(usize, usize)> = s_list.iter().copied().enumerate().collect();
    Ok(par_map(&jobs, |&(k, n)| {
        let mut rng = stream.split(k as u64).generator();
        let est: Vec<f64> = (0..n_repeats).map(|_| mc_logistic_gaussian(m, s, n, &mut rng)).collect();
        (n, variance(&est).sqrt())
    }))
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(usize, f64)]) -> f64 {
    let lx: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Mean absolute difference between two predictives over all entries.
pub fn mean_abs_difference(a: &Matrix, b: &Matrix) -> Result<f64> {
    check_len("predictive rows", a.rows(), b.rows())?;
    check_len("predictive cols", a.cols(), b.cols())?;
    let diffs: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect();
    Ok(if diffs.is_empty() { 0.0 } else { pairwise_sum(&diffs) / diffs.len() as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{SoftmaxLinearModel, TinyMlp};
    use crate::numeric::{cholesky, Provenance};

    fn simpson(m: f64, s: f64, n: usize) -> f64 {
        // independent reference: composite Simpson on [m - 12s, m + 12s]
        let n = n + n % 2;
        let (lo, hi) = (m - 12.0 * s, m + 12.0 * s);
        let h = (hi - lo) / n as f64;
        let g = |f: f64| {
            let u = (f - m) / s;
            1.0 / (1.0 + (-f).exp()) * (-0.5 * u * u).exp() / (s * (2.0 * PI).sqrt())
        };
        let mut acc = g(lo) + g(hi);
        for k in 1..n {
            acc += g(lo + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn quadrature_symmetry_and_delta_limit() {
        for s in [0.1, 1.0, 7.0] {
            assert!((logistic_gaussian_quadrature(0.0, s, 20_000).unwrap() - 0.5).abs() < 1e-10);
        }
        for m in [-3.0, 0.4, 2.5] {
            let q = logistic_gaussian_quadrature(m, 1e-4, 20_000).unwrap();
            assert!((q - sigmoid(m)).abs() < 1e-6);
        }
        assert!(logistic_gaussian_quadrature(1.0, 0.0, 100).is_err());
        assert!(logistic_gaussian_quadrature(1.0, 1.0, 1).is_err());
    }

    #[test]
    fn quadrature_matches_independent_rule() {
        for (m, s) in [(1.0, 2.0), (-4.0, 0.3), (2.0, 9.0)] {
            let q = logistic_gaussian_quadrature(m, s, 20_000).unwrap();
            assert!((q - simpson(m, s, 40_000)).abs() < 1e-9, "{m} {s}");
        }
    }

    #[test]
    fn quadrature_agrees_with_large_mc() {
        let (m, s) = (0.7, 1.8);
        let q = logistic_gaussian_quadrature(m, s, 20_000).unwrap();
        let n = 10_000_000;
        let mut rng = RngStream::new(5).generator();
        let vals: Vec<f64> = standard_normal_vec(&mut rng, n).into_iter().map(|z| sigmoid(m + s * z)).collect();
        let est = pairwise_sum(&vals) / n as f64;
        let se = (variance(&vals) / n as f64).sqrt();
        assert!((est - q).abs() < 3.0 * se, "{est} vs {q} (se {se})");
    }

    #[test]
    fn probit_cases() {
        assert_eq!(probit_binary(0.0, 3.7), 0.5);
        assert_eq!(probit_binary(1.3, 0.0), sigmoid(1.3));
        let q = logistic_gaussian_quadrature(2.0, 2.0, 20_000).unwrap();
        assert!((probit_binary(2.0, 4.0) - q).abs() < 0.02);
        // monotone in m, and shrinking toward 1/2 as the variance grows
        assert!(probit_binary(1.0, 1.0) < probit_binary(1.1, 1.0));
        assert!(probit_binary(1.0, 1.0) > probit_binary(1.0, 2.0));
        assert!(probit_binary(1.0, 1e6) > 0.5);
    }

    #[test]
    fn mpa_cases() {
        let f = [0.3, -1.0, 2.0];
        assert_eq!(mpa(&f, &[0.0; 3]), softmax(&f));
        for p in mpa(&[0.0; 4], &[1.0, 2.0, 3.0, 4.0]) {
            assert!((p - 0.25).abs() < 1e-15);
        }
        // a shift passes through the common scaling
        let a = mpa(&f, &[2.0; 3]);
        let b = mpa(&[10.3, 9.0, 12.0], &[2.0; 3]);
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn mpa_binary_reduction_against_quadrature() {
        // logits ±m/2 with variance v each: f1 − f0 ~ N(m, 2v) when independent
        let (m, v) = (1.5, 2.0);
        let p = mpa(&[-m / 2.0, m / 2.0], &[v, v])[1];
        let scaled = sigmoid(m / (1.0 + PROBIT_SCALE * v).sqrt());
        assert!((p - scaled).abs() < 1e-14);
        let exact = logistic_gaussian_quadrature(m, (2.0 * v).sqrt(), 20_000).unwrap();
        let pb = probit_binary(m, 2.0 * v);
        // MPA scales by the per-class variance, which is half the difference
        // variance, so it is less conservative than both the binary probit and the exact value
        assert!(p > pb && p > exact, "mpa {p} probit {pb} exact {exact}");
        assert!((pb - exact).abs() < 0.02);
    }

    fn linear_posterior(c: usize, p: usize, scale: f64) -> (SoftmaxLinearModel, GaussianPosterior) {
        let net = SoftmaxLinearModel::new(p, c, true);
        let d = net.n_params();
        let mut g = RngStream::new(9).generator();
        let mean: Vec<f64> = standard_normal_vec(&mut g, d).iter().map(|v| 0.5 * v).collect();
        let mut a = Matrix::zeros(d, d);
        for i in 0..d {
            for (j, v) in standard_normal_vec(&mut g, d).into_iter().enumerate() {
                a[(i, j)] = v / (d as f64).sqrt();
            }
        }
        let mut cov = a.matmul(&a.transpose()).unwrap();
        cov.add_diag(0.1);
        cov.scale(scale);
        let post = GaussianPosterior::from_factor(mean, cholesky(&cov).unwrap(), 1.0, Provenance::Laplace).unwrap();
        (net, post)
    }

    #[test]
    fn linearized_identity_covariance_blocks() {
        let net = SoftmaxLinearModel::new(3, 2, true);
        let d = net.n_params();
        let post = GaussianPosterior::from_factor(vec![0.1; d], Matrix::identity(d), 1.0, Provenance::Manual).unwrap();
        let x = [1.0, -2.0, 0.5];
        let g = linearized_output(&post, &net, &x).unwrap();
        let sq = 1.0 + 4.0 + 0.25 + 1.0;
        assert!((g.cov[(0, 0)] - sq).abs() < 1e-14 && (g.cov[(1, 1)] - sq).abs() < 1e-14);
        assert_eq!(g.cov[(0, 1)], 0.0);
    }

    #[test]
    fn linearized_zero_covariance() {
        let (net, post) = linear_posterior(3, 2, 1.0);
        let zero = GaussianPosterior::from_factor(post.mean.clone(), Matrix::zeros(post.dim(), post.dim()), 1.0, Provenance::Manual).unwrap();
        let x = [0.3, -0.7];
        let g = linearized_output(&zero, &net, &x).unwrap();
        assert!(g.cov.data().iter().all(|v| *v == 0.0));
        assert_eq!(g.mean, net.predict(&post.mean, &x));
    }

    #[test]
    fn linearized_matches_mc_for_small_covariance_mlp() {
        let net = TinyMlp::tanh(vec![2, 4, 2]).unwrap();
        let d = net.n_params();
        let mut g = RngStream::new(1).generator();
        let mu = standard_normal_vec(&mut g, d);
        let mut chol = Matrix::identity(d);
        chol.scale(1e-2); // Σ = 1e-4 I
        let post = GaussianPosterior::from_factor(mu, chol, 1.0, Provenance::Manual).unwrap();
        let x = [0.4, -1.1];
        let lin = linearized_output(&post, &net, &x).unwrap();
        let samples = post.sample(100_000, &mut g).unwrap();
        let outs: Vec<Vec<f64>> = samples.iter().map(|th| net.predict(th, &x)).collect();
        for a in 0..2 {
            for b in 0..2 {
                let ma = mean(&outs.iter().map(|o| o[a]).collect::<Vec<_>>());
                let mb = mean(&outs.iter().map(|o| o[b]).collect::<Vec<_>>());
                let c = outs.iter().map(|o| (o[a] - ma) * (o[b] - mb)).sum::<f64>() / (outs.len() - 1) as f64;
                let t = lin.cov[(a, b)];
                assert!((c - t).abs() < 0.05 * lin.cov[(a, a)].max(lin.cov[(b, b)]), "{a}{b}: {c} vs {t}");
            }
        }
    }

    #[test]
    fn mc_predictive_degenerate_cases() {
        let (net, post) = linear_posterior(3, 2, 1.0);
        let lik = Likelihood::Categorical;
        let x = Matrix::from_rows(&[vec![0.2, 0.1], vec![-1.0, 2.0]]).unwrap();
        let th = post.mean.clone();
        let one = SampleSet::new(Matrix::from_rows(std::slice::from_ref(&th)).unwrap(), Provenance::Manual);
        let same = SampleSet::new(Matrix::from_rows(&[th.clone(), th.clone(), th.clone()]).unwrap(), Provenance::Manual);
        let plug = plugin_predictive(&th, &net, &lik, &x).unwrap();
        for s in [one, same] {
            let p = mc_predictive(&s, &net, &lik, &x).unwrap();
            assert!(p.probs.max_abs_diff(&plug.probs) < 1e-15);
        }
        let empty = SampleSet::new(Matrix::zeros(0, net.n_params()), Provenance::Manual);
        assert!(mc_predictive(&empty, &net, &lik, &x).is_err());
    }

    #[test]
    fn binary_mc_matches_quadrature() {
        // one feature, no bias: f = w·x with w ~ N(μ, τ²) gives f ~ N(μx, τ²x²)
        let net = SoftmaxLinearModel::new(1, 1, false);
        let (mu, tau) = (0.8, 1.5);
        let post = GaussianPosterior::from_factor(vec![mu], Matrix::from_diag(&[tau]), 1.0, Provenance::Manual).unwrap();
        let samples = post.sample(1_000_000, &mut RngStream::new(3).generator()).unwrap();
        let x = Matrix::from_rows(&[vec![1.0], vec![-2.0]]).unwrap();
        let p = mc_predictive(&samples, &net, &Likelihood::Bernoulli, &x).unwrap();
        for (i, xv) in [1.0, -2.0].iter().enumerate() {
            let q = logistic_gaussian_quadrature(mu * xv, tau * xv.abs(), 20_000).unwrap();
            assert!((p.probs[(i, 1)] - q).abs() < 2e-3);
        }
    }

    #[test]
    fn linear_model_routes_agree() {
        let (net, post) = linear_posterior(3, 2, 0.5);
        let lik = Likelihood::Categorical;
        let x = Matrix::from_rows(&[vec![0.5, -0.3], vec![1.5, 1.0], vec![-2.0, 0.2]]).unwrap();
        let s = 100_000;
        let samples = post.sample(s, &mut RngStream::new(21).generator()).unwrap();
        let a = mc_predictive(&samples, &net, &lik, &x).unwrap();
        let b = linearized_mc_predictive(&post, &net, &lik, &x, s, RngStream::new(22)).unwrap();
        let (sa, sb) = (a.se.as_ref().unwrap(), b.se.as_ref().unwrap());
        for i in 0..x.rows() {
            for k in 0..3 {
                let se = (sa[(i, k)].powi(2) + sb[(i, k)].powi(2)).sqrt();
                assert!((a.probs[(i, k)] - b.probs[(i, k)]).abs() < 3.0 * se);
            }
        }
    }

    #[test]
    fn rows_are_distributions() {
        let (net, post) = linear_posterior(4, 3, 2.0);
        let x = Matrix::from_rows(&[vec![0.5, -0.3, 3.0], vec![9.0, 1.0, -4.0]]).unwrap();
        let p = analytic_predictive(&post, &net, &Likelihood::Categorical, &x).unwrap();
        assert_eq!(p.method, PredictiveMethod::Mpa);
        for r in p.probs.iter_rows() {
            assert!((pairwise_sum(r) - 1.0).abs() < 1e-9);
        }
        let bad = Matrix::from_rows(&[vec![0.6, 0.6]]).unwrap();
        assert!(PredictiveMatrix::new(bad, PredictiveMethod::Mc, None).is_err());
    }

    #[test]
    fn grid_large_sample_cell_and_determinism() {
        let g = mc_error_grid(&[1.0], &[2.0], 10_000_000, 1, RngStream::new(0)).unwrap();
        assert!(g.max_mc_error().value < 1e-3);
        let a = mc_error_grid(&[-1.0, 2.0], &[0.5, 3.0], 50, 3, RngStream::new(1)).unwrap();
        let b = mc_error_grid(&[-1.0, 2.0], &[0.5, 3.0], 50, 3, RngStream::new(1)).unwrap();
        assert_eq!(a, b);
        assert!(mc_error_grid(&[], &[1.0], 10, 1, RngStream::new(0)).is_err());
    }

    #[test]
    fn scaling_follows_inverse_root() {
        let pts = mc_error_scaling(1.0, 2.0, &[10, 100, 1000, 10_000], 200, RngStream::new(4)).unwrap();
        let slope = loglog_slope(&pts);
        assert!((slope + 0.5).abs() < 0.1, "{slope}");
        let scaled: Vec<f64> = pts.iter().map(|(n, se)| se * (*n as f64).sqrt()).collect();
        let ratio = scaled.iter().copied().fold(0.0, f64::max) / scaled.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(ratio < 2.0);
        for (_, se) in mc_error_scaling(1.0, 1e-9, &[10, 100], 20, RngStream::new(4)).unwrap() {
            assert!(se < 1e-9);
        }
        assert!(mc_error_scaling(1.0, 2.0, &[100, 10], 20, RngStream::new(4)).is_err());
    }
}
