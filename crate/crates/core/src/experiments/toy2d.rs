//! Two-feature logistic regression: LA, VB and refined LA against HMC.

use serde::{Deserialize, Serialize};

use super::{fmt_f64, median, OutputDir, RESULTS_VERSION};
use crate::data_io::{gen_toy_logreg, save_samples_binary, SamplesFile};
use crate::error::{Error, Result};
use crate::laplace::{fit_laplace, MapConfig};
use crate::metrics::mmd;
use crate::models::{Likelihood, LogJoint, SoftmaxLinearModel};
use crate::numeric::{Matrix, RngStream, SampleSet};
use crate::refine::{meanfield_vb, refine, RefineConfig, VbInit};
use crate::sampler::{check_convergence, gelman_rubin, hmc_sample, jittered_inits, HmcConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Toy2dConfig {
    pub flow_lengths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub lambda: f64,
    /// Shared by refinement and VB; `flow_length` and `seed` are set per run.
    pub refine: RefineConfig,
    pub hmc: HmcConfig,
    /// Draws from each approximation compared against the pooled HMC draws.
    pub n_samples: usize,
    pub rhat_threshold: f64,
    /// KDE grid points per axis.
    pub kde_points: usize,
}

impl Default for Toy2dConfig {
    fn default() -> Self {
        Self {
            flow_lengths: vec![1, 5, 10],
            seeds: vec![0],
            lambda: 1.0,
            refine: RefineConfig { epochs: 20, steps_per_epoch: 100, lr: 0.01, n_mc: 32, flow_length: 5, seed: 0, eval_samples: 500 },
            hmc: HmcConfig::default(),
            n_samples: 2400,
            rhat_threshold: 1.1,
            kde_points: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Toy2dRow {
    pub seed: u64,
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow_length: Option<usize>,
    /// Unbiased MMD² to the HMC draws, clamped at zero.
    pub mmd: f64,
    pub mmd_raw: f64,
    pub bandwidth: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_elbo: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HmcDiagnostics {
    pub seed: u64,
    pub rhat: Vec<f64>,
    pub accept_rates: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub divergences: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodMedian {
    pub method: String,
    pub median_mmd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Toy2dResult {
    pub results_version: u32,
    pub config: Toy2dConfig,
    pub rows: Vec<Toy2dRow>,
    pub hmc: Vec<HmcDiagnostics>,
    pub medians: Vec<MethodMedian>,
    /// Draws per `(seed, method)`, HMC included; not part of the JSON.
    #[serde(skip)]
    pub samples: Vec<(u64, String, SampleSet)>,
}

impl Toy2dResult {
    pub fn median_mmd(&self, method: &str) -> Option<f64> {
        self.medians.iter().find(|m| m.method == method).map(|m| m.median_mmd)
    }
}

fn refine_name(l: usize) -> String {
    format!("refine-{l}")
}

pub fn run_toy_2d(config: &Toy2dConfig) -> Result<Toy2dResult> {
    if config.seeds.is_empty() || config.n_samples < 2 {
        return Err(Error::InvalidArgument("toy-2d needs at least one seed and two samples".into()));
    }
    let net = SoftmaxLinearModel::new(2, 1, true);
    let lik = Likelihood::Bernoulli;
    let mut rows = Vec::new();
    let mut diags = Vec::new();
    let mut samples = Vec::new();
    for &seed in &config.seeds {
        let root = RngStream::new(seed);
        let data = gen_toy_logreg(&mut root.generator());
        let (la, _) = fit_laplace(&net, &lik, &data, config.lambda, &MapConfig { seed, ..Default::default() })?;
        let target = LogJoint::new(&net, &lik, &data, config.lambda)?;

        let inits = jittered_inits(&la, config.hmc.n_chains, &mut root.split(1).generator());
        let chains = hmc_sample(&target, &inits, &HmcConfig { seed, ..config.hmc })?;
        let rhat = gelman_rubin(&chains)?;
        check_convergence(&rhat, config.rhat_threshold)?;
        diags.push(HmcDiagnostics {
            seed,
            rhat,
            accept_rates: chains.accept_rates.clone(),
            step_sizes: chains.step_sizes.clone(),
            divergences: chains.divergences.clone(),
        });
        let hmc = chains.pooled();

        let draw_stream = root.split(2);
        let mut methods: Vec<(String, Option<usize>, Option<f64>, SampleSet)> = Vec::new();
        methods.push(("la".into(), None, None, la.sample(config.n_samples, &mut draw_stream.split(0).generator())?));

        let vb_init = VbInit { mean: la.mean.clone(), std: la.cov.diag().iter().map(|v| v.sqrt()).collect() };
        let (vb, vb_trace) = meanfield_vb(&target, config.lambda, &vb_init, &RefineConfig { seed, ..config.refine })?;
        methods.push(("vb".into(), None, Some(vb_trace.best_elbo), vb.sample(config.n_samples, &mut draw_stream.split(1).generator())?));

        for &l in &config.flow_lengths {
            let (rp, trace) = refine(&la, &target, &RefineConfig { flow_length: l, seed, ..config.refine })?;
            let (s, _) = rp.sample(config.n_samples, &mut draw_stream.split(2 + l as u64).generator());
            methods.push((refine_name(l), Some(l), Some(trace.best_elbo), s));
        }

        for (method, flow_length, best_elbo, s) in methods {
            let m = mmd(&s, &hmc)?;
            rows.push(Toy2dRow { seed, method: method.clone(), flow_length, mmd: m.value(), mmd_raw: m.raw, bandwidth: m.bandwidth, best_elbo });
            samples.push((seed, method, s));
        }
        samples.push((seed, "hmc".into(), hmc));
    }

    let mut names = vec!["la".to_string(), "vb".to_string()];
    names.extend(config.flow_lengths.iter().map(|&l| refine_name(l)));
    let medians = names
        .into_iter()
        .map(|method| {
            let v: Vec<f64> = rows.iter().filter(|r| r.method == method).map(|r| r.mmd).collect();
            MethodMedian { median_mmd: median(&v), method }
        })
        .collect();
    Ok(Toy2dResult { results_version: RESULTS_VERSION, config: config.clone(), rows, hmc: diags, medians, samples })
}

/// Gaussian KDE of two coordinates on an `n × n` grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KdeGrid {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Rows indexed by `x`.
    pub density: Matrix,
}

/// Product-Gaussian KDE of coordinates `(i, j)` with Scott's bandwidth,
/// evaluated on an `n × n` grid spanning `x_range × y_range`.
pub fn kde_grid(samples: &SampleSet, (i, j): (usize, usize), n: usize, x_range: (f64, f64), y_range: (f64, f64)) -> Result<KdeGrid> {
    if samples.len() < 2 || i >= samples.dim() || j >= samples.dim() || n == 0 {
        return Err(Error::InvalidArgument("kde needs >= 2 samples, valid coordinates and n >= 1".into()));
    }
    let xs: Vec<f64> = samples.iter().map(|r| r[i]).collect();
    let ys: Vec<f64> = samples.iter().map(|r| r[j]).collect();
    let scott = (samples.len() as f64).powf(-1.0 / 6.0);
    let hx = crate::numeric::sum::variance(&xs).sqrt().max(1e-12) * scott;
    let hy = crate::numeric::sum::variance(&ys).sqrt().max(1e-12) * scott;
    let gx = crate::predictive::linspace(x_range.0, x_range.1, n);
    let gy = crate::predictive::linspace(y_range.0, y_range.1, n);
    let norm = 1.0 / (2.0 * std::f64::consts::PI * hx * hy * samples.len() as f64);
    let mut density = Matrix::zeros(n, n);
    for (a, x) in gx.iter().enumerate() {
        for (b, y) in gy.iter().enumerate() {
            let terms: Vec<f64> = xs
                .iter()
                .zip(&ys)
                .map(|(sx, sy)| {
                    let u = (x - sx) / hx;
                    let v = (y - sy) / hy;
                    (-0.5 * (u * u + v * v)).exp()
                })
                .collect();
            density[(a, b)] = norm * crate::numeric::sum::pairwise_sum(&terms);
        }
    }
    Ok(KdeGrid { x: gx, y: gy, density })
}

impl Toy2dResult {
    /// Writes `mmd.csv`, `results.json`, one samples file and one weight-plane
    /// KDE grid per `(seed, method)`.
    pub fn write(&self, out: &mut OutputDir) -> Result<()> {
        out.write_csv(
            "mmd.csv",
            &["seed", "method", "flow_length", "mmd", "mmd_raw", "bandwidth"],
            self.rows.iter().map(|r| {
                vec![
                    r.seed.to_string(),
                    r.method.clone(),
                    r.flow_length.map(|l| l.to_string()).unwrap_or_default(),
                    fmt_f64(r.mmd),
                    fmt_f64(r.mmd_raw),
                    fmt_f64(r.bandwidth),
                ]
            }),
        )?;
        for &seed in &self.config.seeds {
            let Some((_, _, hmc)) = self.samples.iter().find(|(s, m, _)| *s == seed && m == "hmc") else {
                continue;
            };
            let range = |k: usize| {
                let col = hmc.samples.column(k);
                let m = crate::numeric::sum::mean(&col);
                let sd = crate::numeric::sum::variance(&col).sqrt();
                (m - 4.0 * sd, m + 4.0 * sd)
            };
            let (xr, yr) = (range(0), range(1));
            for (_, method, s) in self.samples.iter().filter(|(s, _, _)| *s == seed) {
                let path = out.artifact(&format!("samples_{method}_seed{seed}.bin"));
                save_samples_binary(&path, &SamplesFile { samples: s.clone(), seed })?;
                let kde = kde_grid(s, (0, 1), self.config.kde_points, xr, yr)?;
                out.write_csv(
                    &format!("kde_{method}_seed{seed}.csv"),
                    &["w1", "w2", "density"],
                    kde.x.iter().enumerate().flat_map(|(a, x)| {
                        let kde = &kde;
                        kde.y.iter().enumerate().map(move |(b, y)| vec![fmt_f64(*x), fmt_f64(*y), fmt_f64(kde.density[(a, b)])])
                    }),
                )?;
            }
        }
        out.write_json("results.json", self)
    }
}
