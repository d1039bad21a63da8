//! MC integration against linearized and multi-class probit predictives.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{fmt_f64, OutputDir, RESULTS_VERSION};
use crate::data_io::{gen_toy_logreg, gen_toy_regression};
use crate::error::{Error, Result};
use crate::laplace::{fit_laplace, fit_map, ggn_log_joint, hessian_log_joint, laplace_posterior, GaussianPosterior, MapConfig};
use crate::models::{Dataset, Likelihood, Network, SoftmaxLinearModel, TinyMlp};
use crate::numeric::{Matrix, RngStream};
use crate::predictive::{analytic_predictive, linearized_output, linearized_regression, linspace, mc_predictive, mc_regression};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticConfig {
    /// Regression CSV (`x…,y` with a header); the toy generator when absent.
    pub data: Option<PathBuf>,
    pub n_train: usize,
    pub hidden: usize,
    pub sigma: f64,
    pub lambda: f64,
    pub mc_samples: usize,
    pub test_points: usize,
    pub test_range: (f64, f64),
    pub control_samples: usize,
    pub control_points: Vec<f64>,
    /// Points per axis of the 2D classification grid.
    pub grid2d: usize,
    pub grid_range: (f64, f64),
    pub class_hidden: usize,
    pub class_mc_samples: usize,
    pub map_epochs: usize,
    pub seed: u64,
}

impl Default for AnalyticConfig {
    fn default() -> Self {
        Self {
            data: None,
            n_train: 60,
            hidden: 16,
            sigma: 0.3,
            lambda: 1.0,
            mc_samples: 10_000,
            test_points: 100,
            test_range: (-6.0, 6.0),
            control_samples: 100_000,
            control_points: vec![-3.0, -1.5, 0.0, 1.5, 3.0],
            grid2d: 50,
            grid_range: (-4.0, 4.0),
            class_hidden: 8,
            class_mc_samples: 1000,
            map_epochs: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionRow {
    pub x: f64,
    pub mc_mean: f64,
    pub mc_std: f64,
    pub lin_mean: f64,
    pub lin_std: f64,
}

/// Mean and max absolute gaps between two predictive summaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Disagreement {
    pub mean_abs_mean_diff: f64,
    pub max_abs_mean_diff: f64,
    pub mean_abs_std_diff: f64,
    pub max_abs_std_diff: f64,
}

/// Linear model: MC predictive mean from parameter draws against the
/// linearized output Gaussian, which is exact here.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearControl {
    pub x: Vec<f64>,
    pub mc_mean: Vec<f64>,
    pub lin_mean: Vec<f64>,
    /// Standard error of the MC mean.
    pub se: Vec<f64>,
    pub z: Vec<f64>,
    pub max_abs_z: f64,
    pub within_3se: bool,
    pub mc_std: Vec<f64>,
    pub lin_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationGridRow {
    pub x1: f64,
    pub x2: f64,
    pub mc_confidence: f64,
    pub mpa_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticResult {
    pub results_version: u32,
    pub config: AnalyticConfig,
    pub regression_precision: PrecisionKind,
    pub classification_precision: PrecisionKind,
    pub mlp_disagreement: Disagreement,
    pub control: LinearControl,
    pub grid_mean_abs_confidence_diff: f64,
    pub grid_max_abs_confidence_diff: f64,
    #[serde(skip)]
    pub regression: Vec<RegressionRow>,
    #[serde(skip)]
    pub grid: Vec<ClassificationGridRow>,
}

/// Reads a regression CSV with a header; the last column is the target.
pub fn load_regression_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let width = reader.headers()?.len();
    if width < 2 {
        return Err(Error::Parse { line: 1, message: "need at least one feature and a target column".into() });
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec?;
        if rec.len() != width {
            return Err(Error::Parse { line, message: format!("expected {width} fields, found {}", rec.len()) });
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse { line, message: format!("invalid number '{cell}'") })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, message: format!("non-finite value in column {j}") });
            }
            if j + 1 == width {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    Dataset::regression(Matrix::from_vec(ys.len(), width - 1, xs)?, ys)
}

fn disagreement(a: &[(f64, f64)], b: &[(f64, f64)]) -> Disagreement {
    let dm: Vec<f64> = a.iter().zip(b).map(|(p, q)| (p.0 - q.0).abs()).collect();
    let ds: Vec<f64> = a.iter().zip(b).map(|(p, q)| (p.1 - q.1).abs()).collect();
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    Disagreement {
        mean_abs_mean_diff: crate::numeric::sum::mean(&dm),
        max_abs_mean_diff: max(&dm),
        mean_abs_std_diff: crate::numeric::sum::mean(&ds),
        max_abs_std_diff: max(&ds),
    }
}

/// Precision used for an all-layer Laplace approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionKind {
    Hessian,
    Ggn,
}

/// Laplace at the MAP with the finite-difference Hessian, or the generalized
/// Gauss-Newton matrix when that Hessian is not positive definite.
fn mlp_laplace(net: &dyn Network, lik: &Likelihood, data: &Dataset, lambda: f64, config: &MapConfig) -> Result<(GaussianPosterior, PrecisionKind)> {
    let fit = fit_map(net, lik, data, lambda, config)?;
    let h = hessian_log_joint(net, lik, &fit.theta, data, lambda)?;
    match laplace_posterior(&fit.theta, &h, lambda) {
        Ok(post) => Ok((post, PrecisionKind::Hessian)),
        Err(Error::NotPositiveDefinite { .. }) => {
            let ggn = ggn_log_joint(net, lik, &fit.theta, data, lambda)?;
            Ok((laplace_posterior(&fit.theta, &ggn, lambda)?, PrecisionKind::Ggn))
        }
        Err(e) => Err(e),
    }
}

fn column(xs: &[f64]) -> Result<Matrix> {
    Matrix::from_vec(xs.len(), 1, xs.to_vec())
}

pub fn run_mc_vs_analytic(config: &AnalyticConfig) -> Result<AnalyticResult> {
    if config.grid2d == 0 || config.mc_samples < 2 || config.control_samples < 2 || config.class_mc_samples < 2 || config.test_points == 0 {
        return Err(Error::InvalidArgument("grid size, test points and sample counts must be positive".into()));
    }
    let root = RngStream::new(config.seed);
    let data = match &config.data {
        Some(p) => load_regression_csv(p)?,
        None => gen_toy_regression(&mut root.generator(), config.n_train),
    };
    if data.n_features() != 1 {
        return Err(Error::InvalidArgument(format!("regression data must have one feature, found {}", data.n_features())));
    }
    let lik = Likelihood::gaussian(config.sigma)?;
    let map_cfg = MapConfig { max_epochs: config.map_epochs, seed: config.seed, ..Default::default() };

    // all-layer Laplace on a tanh MLP: MC over weights against the linearized predictive
    let mlp = TinyMlp::tanh(vec![1, config.hidden, 1])?;
    let (post, regression_precision) = mlp_laplace(&mlp, &lik, &data, config.lambda, &map_cfg)?;
    let xs = linspace(config.test_range.0, config.test_range.1, config.test_points);
    let x_test = column(&xs)?;
    let draws = post.sample(config.mc_samples, &mut root.split(1).generator())?;
    let mc = mc_regression(&draws, &mlp, config.sigma, &x_test)?;
    let lin = linearized_regression(&post, &mlp, config.sigma, &x_test)?;
    let regression: Vec<RegressionRow> = (0..xs.len())
        .map(|i| RegressionRow { x: xs[i], mc_mean: mc.mean[i], mc_std: mc.std[i], lin_mean: lin.mean[i], lin_std: lin.std[i] })
        .collect();
    let pairs = |m: &[f64], s: &[f64]| -> Vec<(f64, f64)> { m.iter().copied().zip(s.iter().copied()).collect() };
    let mlp_disagreement = disagreement(&pairs(&mc.mean, &mc.std), &pairs(&lin.mean, &lin.std));

    // linear control arm
    let linear = SoftmaxLinearModel::new(1, 1, true);
    let (lpost, _) = fit_laplace(&linear, &lik, &data, config.lambda, &MapConfig { seed: config.seed, ..Default::default() })?;
    let xc = column(&config.control_points)?;
    let cdraws = lpost.sample(config.control_samples, &mut root.split(2).generator())?;
    let cmc = mc_regression(&cdraws, &linear, config.sigma, &xc)?;
    let clin = linearized_regression(&lpost, &linear, config.sigma, &xc)?;
    let mut se = Vec::new();
    for x in &config.control_points {
        let g = linearized_output(&lpost, &linear, &[*x])?;
        se.push((g.cov[(0, 0)] / config.control_samples as f64).sqrt());
    }
    let z: Vec<f64> = (0..se.len()).map(|i| (cmc.mean[i] - clin.mean[i]) / se[i]).collect();
    let max_abs_z = z.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let control = LinearControl {
        x: config.control_points.clone(),
        mc_mean: cmc.mean,
        lin_mean: clin.mean,
        se,
        z,
        max_abs_z,
        within_3se: max_abs_z <= 3.0,
        mc_std: cmc.std,
        lin_std: clin.std,
    };

    // 2D classification: MC confidence against the probit/MPA confidence
    let cdata = gen_toy_logreg(&mut root.split(3).generator());
    let cnet = TinyMlp::tanh(vec![2, config.class_hidden, 1])?;
    let blik = Likelihood::Bernoulli;
    let (cpost, classification_precision) = mlp_laplace(&cnet, &blik, &cdata, config.lambda, &map_cfg)?;
    let g = linspace(config.grid_range.0, config.grid_range.1, config.grid2d);
    let mut pts = Vec::with_capacity(g.len() * g.len() * 2);
    for a in &g {
        for b in &g {
            pts.extend([*a, *b]);
        }
    }
    let x_grid = Matrix::from_vec(g.len() * g.len(), 2, pts)?;
    let gdraws = cpost.sample(config.class_mc_samples, &mut root.split(4).generator())?;
    let p_mc = mc_predictive(&gdraws, &cnet, &blik, &x_grid)?;
    let p_mpa = analytic_predictive(&cpost, &cnet, &blik, &x_grid)?;
    let (c_mc, c_mpa) = (p_mc.confidence(), p_mpa.confidence());
    let grid: Vec<ClassificationGridRow> = (0..x_grid.rows())
        .map(|i| ClassificationGridRow { x1: x_grid[(i, 0)], x2: x_grid[(i, 1)], mc_confidence: c_mc[i], mpa_confidence: c_mpa[i] })
        .collect();
    let diffs: Vec<f64> = c_mc.iter().zip(&c_mpa).map(|(a, b)| (a - b).abs()).collect();

    Ok(AnalyticResult {
        results_version: RESULTS_VERSION,
        config: config.clone(),
        regression_precision,
        classification_precision,
        mlp_disagreement,
        control,
        grid_mean_abs_confidence_diff: crate::numeric::sum::mean(&diffs),
        grid_max_abs_confidence_diff: diffs.iter().copied().fold(0.0, f64::max),
        regression,
        grid,
    })
}

impl AnalyticResult {
    /// Writes `regression.csv`, `grid2d.csv` and `results.json`.
    pub fn write(&self, out: &mut OutputDir) -> Result<()> {
        out.write_csv(
            "regression.csv",
            &["x", "mc_mean", "mc_std", "lin_mean", "lin_std"],
            self.regression.iter().map(|r| vec![fmt_f64(r.x), fmt_f64(r.mc_mean), fmt_f64(r.mc_std), fmt_f64(r.lin_mean), fmt_f64(r.lin_std)]),
        )?;
        out.write_csv(
            "grid2d.csv",
            &["x1", "x2", "mc_confidence", "mpa_confidence"],
            self.grid.iter().map(|r| vec![fmt_f64(r.x1), fmt_f64(r.x2), fmt_f64(r.mc_confidence), fmt_f64(r.mpa_confidence)]),
        )?;
        out.write_json("results.json", self)
    }
}
