//! Last-layer classification on a desk-scale feature task: method comparison,
//! base-distribution ablation, OOD detection and the standalone refine command.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{fmt_f64, median, OutputDir, RESULTS_VERSION};
use crate::data_io::{gen_mixture_classes, load_features_csv, load_posterior, save_posterior, PosteriorFile, PosteriorKind};
use crate::error::{check_len, Error, Result};
use crate::flows::RefinedPosterior;
use crate::laplace::{fit_laplace, tune_prior_precision, GaussianPosterior, MapConfig, MapFit};
use crate::metrics::{fpr95, temperature_scale, MetricsReport};
use crate::models::{Dataset, Likelihood, LogJoint, Minibatcher, Network, SoftmaxLinearModel};
use crate::numeric::sum::softmax;
use crate::numeric::{Matrix, RngStream, SampleSet};
use crate::predictive::{mc_predictive, plugin_predictive};
use crate::refine::{meanfield_vb_minibatch, refine_minibatch, ElboTrace, RefineConfig, VbInit};
use crate::sampler::{gelman_rubin, hmc_sample, jittered_inits, ChainSet, HmcConfig, Whitened};

/// Where the features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    /// `gen_mixture_classes` with the given shape.
    Mixture { n_classes: usize, n_features: usize, n: usize, separation: f64 },
    /// Feature CSV; without a test file the train file is split.
    Csv { train: PathBuf, test: Option<PathBuf> },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Mixture { n_classes: 10, n_features: 64, n: 10_000, separation: 3.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub data: DataSource,
    /// Share of the data used for training when no test file is given.
    pub train_frac: f64,
    /// Share of the training part held out for temperature and λ selection.
    pub val_frac: f64,
    pub lambda: f64,
    /// When set, λ is chosen from this grid by validation NLL.
    pub lambda_grid: Option<Vec<f64>>,
    pub map: MapConfig,
    pub batch_size: usize,
    /// `steps_per_epoch = 0` means one pass over the training data per epoch.
    pub refine: RefineConfig,
    pub hmc: HmcConfig,
    /// Keep every `hmc_thin`-th HMC draw of each chain.
    pub hmc_thin: usize,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            train_frac: 0.8,
            val_frac: 0.1,
            lambda: 1.0,
            lambda_grid: None,
            map: MapConfig { max_epochs: 50, ..Default::default() },
            batch_size: 128,
            refine: RefineConfig { epochs: 20, steps_per_epoch: 0, lr: 0.001, n_mc: 8, flow_length: 5, seed: 0, eval_samples: 16 },
            hmc: HmcConfig { n_chains: 4, n_warmup: 200, n_samples: 300, n_leapfrog: 8, target_accept: 0.8, seed: 0 },
            hmc_thin: 2,
        }
    }
}

/// Training, validation and test parts of one seed's data.
#[derive(Debug, Clone, PartialEq)]
pub struct DeskSplit {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DeskConfig {
    fn validate(&self) -> Result<()> {
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) || !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return Err(Error::InvalidArgument("train and validation fractions must lie in (0, 1)".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("lambda {} must be > 0", self.lambda)));
        }
        if self.hmc_thin == 0 {
            return Err(Error::InvalidArgument("hmc thinning must be >= 1".into()));
        }
        Ok(())
    }

    pub fn split(&self, seed: u64) -> Result<DeskSplit> {
        self.validate()?;
        let root = RngStream::new(seed);
        let (train, test) = match &self.data {
            DataSource::Mixture { n_classes, n_features, n, separation } => {
                let all = gen_mixture_classes(*n_classes, *n_features, *n, *separation, &mut root.generator())?;
                all.split(self.train_frac, &mut root.split(1).generator())
            }
            DataSource::Csv { train, test: Some(test) } => {
                let tr = load_features_csv(train, None)?;
                let te = load_features_csv(test, Some(tr.n_classes))?;
                check_len("test features", tr.n_features(), te.n_features())?;
                (tr, te)
            }
            DataSource::Csv { train, test: None } => load_features_csv(train, None)?.split(self.train_frac, &mut root.split(1).generator()),
        };
        let (train, val) = train.split(1.0 - self.val_frac, &mut root.split(2).generator());
        if train.is_empty() || val.is_empty() || test.is_empty() {
            return Err(Error::InvalidArgument("data too small for a train/validation/test split".into()));
        }
        Ok(DeskSplit { train, val, test })
    }

    fn refine_config(&self, batches: &Minibatcher, flow_length: usize, seed: u64) -> RefineConfig {
        let steps = if self.refine.steps_per_epoch == 0 { batches.steps_per_epoch() } else { self.refine.steps_per_epoch };
        RefineConfig { flow_length, seed, steps_per_epoch: steps, ..self.refine }
    }
}

/// MAP fit and Laplace posterior of the linear-softmax last layer.
#[derive(Debug, Clone)]
pub struct FittedBase {
    pub net: SoftmaxLinearModel,
    pub lik: Likelihood,
    pub lambda: f64,
    pub map: MapFit,
    pub la: GaussianPosterior,
}

pub fn fit_base(config: &DeskConfig, split: &DeskSplit, seed: u64) -> Result<FittedBase> {
    let net = SoftmaxLinearModel::new(split.train.n_features(), split.train.n_classes, true);
    let lik = Likelihood::Categorical;
    let map_cfg = MapConfig { seed, ..config.map };
    let lambda = match &config.lambda_grid {
        Some(grid) => tune_prior_precision(&net, &lik, &split.train, &split.val, grid, &map_cfg, 20)?.best,
        None => config.lambda,
    };
    let (la, map) = fit_laplace(&net, &lik, &split.train, lambda, &map_cfg)?;
    Ok(FittedBase { net, lik, lambda, map, la })
}

/// Methods compared on the desk task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Map,
    MapTemp,
    La,
    LaRefine(usize),
    Vb,
    Hmc,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Map => write!(f, "map"),
            Method::MapTemp => write!(f, "map-temp"),
            Method::La => write!(f, "la"),
            Method::LaRefine(l) => write!(f, "la-refine-{l}"),
            Method::Vb => write!(f, "vb"),
            Method::Hmc => write!(f, "hmc"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "map" => Method::Map,
            "map-temp" => Method::MapTemp,
            "la" => Method::La,
            "vb" => Method::Vb,
            "hmc" => Method::Hmc,
            _ => match s.strip_prefix("la-refine-").and_then(|l| l.parse().ok()) {
                Some(l) => Method::LaRefine(l),
                None => return Err(Error::InvalidArgument(format!("unknown method '{s}'"))),
            },
        })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Stream key for a method's predictive draws. LA and its refinements share a
/// key so their predictives use common random numbers.
fn draw_key(method: Method) -> u64 {
    match method {
        Method::Map | Method::MapTemp => 0,
        Method::La | Method::LaRefine(_) => 1,
        Method::Vb => 2,
        Method::Hmc => 3,
    }
}

/// HMC reference draws in the original coordinates.
#[derive(Debug, Clone)]
pub struct HmcRun {
    pub chains: ChainSet,
    pub pooled: SampleSet,
    pub rhat_max: f64,
}

/// HMC on the log joint, whitened by the Laplace frame and started near its
/// mean. Each chain is thinned by `hmc_thin` before pooling.
pub fn run_hmc(config: &DeskConfig, split: &DeskSplit, base: &FittedBase, seed: u64) -> Result<HmcRun> {
    let target = LogJoint::new(&base.net, &base.lik, &split.train, base.lambda)?;
    let white = Whitened::new(&target, &base.la)?;
    let d = base.la.dim();
    let inits = jittered_inits(&GaussianPosterior::standard_normal(d), config.hmc.n_chains, &mut RngStream::new(seed).split(20).generator());
    let z = hmc_sample(&white, &inits, &HmcConfig { seed, ..config.hmc })?;
    let mut chains = z.map_samples(|s| white.to_original(s));
    for c in &mut chains.chains {
        *c = c.thin(config.hmc_thin);
    }
    let rhat_max = if chains.n_chains() >= 2 && chains.len() >= 10 {
        gelman_rubin(&chains)?.into_iter().fold(f64::NEG_INFINITY, f64::max)
    } else {
        f64::NAN
    };
    let pooled = chains.pooled();
    Ok(HmcRun { chains, pooled, rhat_max })
}

enum Fitted {
    Point(Vec<f64>),
    Tempered(Vec<f64>, f64),
    Gaussian(GaussianPosterior),
    Refined(RefinedPosterior),
    Chains,
}

/// Per-method training diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodDiagnostics {
    pub seed: u64,
    pub method: Method,
    pub fit_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_elbo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rhat_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accept_rates: Option<Vec<f64>>,
}

struct SeedContext<'a> {
    seed: u64,
    config: &'a DeskConfig,
    split: &'a DeskSplit,
    base: &'a FittedBase,
    hmc: Option<&'a HmcRun>,
}

fn logits(net: &dyn Network, theta: &[f64], x: &Matrix) -> Matrix {
    let c = net.n_outputs();
    let mut out = Matrix::zeros(x.rows(), c);
    for (i, row) in x.iter_rows().enumerate() {
        net.forward(theta, row, out.row_mut(i));
    }
    out
}

impl SeedContext<'_> {
    fn fit(&self, method: Method) -> Result<(Fitted, MethodDiagnostics)> {
        let started = Instant::now();
        let mut diag = MethodDiagnostics {
            seed: self.seed,
            method,
            fit_seconds: 0.0,
            temperature: None,
            best_elbo: None,
            best_epoch: None,
            rhat_max: None,
            accept_rates: None,
        };
        let base = self.base;
        let fitted = match method {
            Method::Map => Fitted::Point(base.map.theta.clone()),
            Method::MapTemp => {
                let val_labels = self.split.val.labels().ok_or_else(|| Error::InvalidArgument("validation data has no labels".into()))?;
                let t = temperature_scale(&logits(&base.net, &base.map.theta, &self.split.val.x), val_labels)?;
                diag.temperature = Some(t);
                Fitted::Tempered(base.map.theta.clone(), t)
            }
            Method::La => Fitted::Gaussian(base.la.clone()),
            Method::LaRefine(l) => {
                let target = LogJoint::new(&base.net, &base.lik, &self.split.train, base.lambda)?;
                let batches = Minibatcher::new(target, self.config.batch_size)?;
                let (rp, trace) = refine_minibatch(&base.la, &batches, &self.config.refine_config(&batches, l, self.seed))?;
                diag.best_elbo = Some(trace.best_elbo);
                diag.best_epoch = Some(trace.best_epoch);
                Fitted::Refined(rp)
            }
            Method::Vb => {
                let target = LogJoint::new(&base.net, &base.lik, &self.split.train, base.lambda)?;
                let batches = Minibatcher::new(target, self.config.batch_size)?;
                let init = VbInit { mean: base.la.mean.clone(), std: base.la.cov.diag().iter().map(|v| v.sqrt()).collect() };
                let (vb, trace) = meanfield_vb_minibatch(&batches, &init, &self.config.refine_config(&batches, 0, self.seed))?;
                diag.best_elbo = Some(trace.best_elbo);
                diag.best_epoch = Some(trace.best_epoch);
                Fitted::Gaussian(vb)
            }
            Method::Hmc => {
                let hmc = self.hmc.ok_or_else(|| Error::InvalidArgument("hmc draws were not computed".into()))?;
                diag.rhat_max = Some(hmc.rhat_max);
                diag.accept_rates = Some(hmc.chains.accept_rates.clone());
                Fitted::Chains
            }
        };
        diag.fit_seconds = started.elapsed().as_secs_f64();
        Ok((fitted, diag))
    }

    /// Parameter draws for the MC predictive (`None` for point estimates).
    fn draws(&self, method: Method, fitted: &Fitted, n: usize, key: u64) -> Result<Option<SampleSet>> {
        let mut rng = RngStream::new(self.seed).split(30 + key).split(draw_key(method)).generator();
        Ok(match fitted {
            Fitted::Point(_) | Fitted::Tempered(..) => None,
            Fitted::Gaussian(g) => Some(g.sample(n, &mut rng)?),
            Fitted::Refined(rp) => Some(rp.sample(n, &mut rng).0),
            Fitted::Chains => self.hmc.map(|h| h.pooled.clone()),
        })
    }

    fn probs(&self, fitted: &Fitted, draws: Option<&SampleSet>, x: &Matrix) -> Result<Matrix> {
        let net = &self.base.net;
        let lik = &self.base.lik;
        Ok(match (fitted, draws) {
            (Fitted::Point(theta), _) => plugin_predictive(theta, net, lik, x)?.probs,
            (Fitted::Tempered(theta, t), _) => {
                let mut l = logits(net, theta, x);
                for i in 0..l.rows() {
                    let row: Vec<f64> = l.row(i).iter().map(|v| v / t).collect();
                    l.row_mut(i).copy_from_slice(&softmax(&row));
                }
                l
            }
            (_, Some(s)) => mc_predictive(s, net, lik, x)?.probs,
            (_, None) => return Err(Error::InvalidArgument("sampling method without draws".into())),
        })
    }
}

fn labels_of(data: &Dataset) -> Result<&[usize]> {
    data.labels().ok_or_else(|| Error::InvalidArgument("classification labels required".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub desk: DeskConfig,
    pub methods: Vec<Method>,
    pub s_samples: usize,
    pub seeds: Vec<u64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            desk: DeskConfig::default(),
            methods: vec![Method::Map, Method::MapTemp, Method::La, Method::LaRefine(5), Method::Vb, Method::Hmc],
            s_samples: 20,
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareResult {
    pub results_version: u32,
    pub config: CompareConfig,
    pub lambda: Vec<f64>,
    pub rows: Vec<MetricsReport>,
    pub diagnostics: Vec<MethodDiagnostics>,
}

impl CompareResult {
    pub fn row(&self, method: Method, seed: u64) -> Option<&MetricsReport> {
        let name = method.to_string();
        self.rows.iter().find(|r| r.method == name && r.seed == seed)
    }
}

fn check_methods(methods: &[Method], seeds: &[u64]) -> Result<()> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one method and one seed".into()));
    }
    Ok(())
}

/// Metrics of every method on the held-out split, with MMD to the HMC draws
/// for sampling methods when HMC is among the methods.
pub fn run_compare(config: &CompareConfig) -> Result<CompareResult> {
    check_methods(&config.methods, &config.seeds)?;
    if config.s_samples == 0 {
        return Err(Error::InvalidArgument("s-samples must be positive".into()));
    }
    let mut rows = Vec::new();
    let mut diagnostics = Vec::new();
    let mut lambdas = Vec::new();
    for &seed in &config.seeds {
        let split = config.desk.split(seed)?;
        let labels = labels_of(&split.test)?;
        let base = fit_base(&config.desk, &split, seed)?;
        lambdas.push(base.lambda);
        let hmc = if config.methods.contains(&Method::Hmc) { Some(run_hmc(&config.desk, &split, &base, seed)?) } else { None };
        let ctx = SeedContext { seed, config: &config.desk, split: &split, base: &base, hmc: hmc.as_ref() };
        for &method in &config.methods {
            let (fitted, diag) = ctx.fit(method)?;
            let draws = ctx.draws(method, &fitted, config.s_samples, 0)?;
            let probs = ctx.probs(&fitted, draws.as_ref(), &split.test.x)?;
            let mut report = MetricsReport::evaluate(&method.to_string(), seed, draws.as_ref().map(|d| d.len()), &probs, labels)?;
            if let (Some(h), Some(_)) = (&hmc, &draws) {
                report.mmd = Some(match method {
                    Method::Hmc => {
                        let half = h.chains.n_chains() / 2;
                        if half == 0 {
                            f64::NAN
                        } else {
                            let a = ChainSet { chains: h.chains.chains[..half].to_vec(), ..h.chains.clone() }.pooled();
                            let b = ChainSet { chains: h.chains.chains[half..].to_vec(), ..h.chains.clone() }.pooled();
                            crate::metrics::mmd(&a, &b)?.value()
                        }
                    }
                    _ => {
                        let extra = ctx.draws(method, &fitted, h.pooled.len(), 1)?.expect("sampling method");
                        crate::metrics::mmd(&extra, &h.pooled)?.value()
                    }
                });
            }
            rows.push(report);
            diagnostics.push(diag);
        }
    }
    Ok(CompareResult { results_version: RESULTS_VERSION, config: config.clone(), lambda: lambdas, rows, diagnostics })
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn write_reports(out: &mut OutputDir, name: &str, rows: &[MetricsReport]) -> Result<()> {
    out.write_csv(
        name,
        &["method", "seed", "s", "nll", "ece", "brier", "accuracy", "mmd", "fpr95"],
        rows.iter().map(|r| {
            vec![
                r.method.clone(),
                r.seed.to_string(),
                r.s.map(|s| s.to_string()).unwrap_or_default(),
                fmt_f64(r.nll),
                fmt_f64(r.ece),
                fmt_f64(r.brier),
                fmt_f64(r.accuracy),
                opt(r.mmd),
                opt(r.fpr95),
            ]
        }),
    )
}

impl CompareResult {
    pub fn write(&self, out: &mut OutputDir) -> Result<()> {
        write_reports(out, "metrics.csv", &self.rows)?;
        out.write_json("results.json", self)
    }
}

/// Base distribution of an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseKind {
    La,
    StandardNormal,
}

impl FromStr for BaseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "la" => Ok(BaseKind::La),
            "standard-normal" => Ok(BaseKind::StandardNormal),
            _ => Err(Error::InvalidArgument(format!("unknown base '{s}'"))),
        }
    }
}

impl fmt::Display for BaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaseKind::La => "la",
            BaseKind::StandardNormal => "standard-normal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub desk: DeskConfig,
    pub lengths: Vec<usize>,
    pub bases: Vec<BaseKind>,
    pub s_samples: usize,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            desk: DeskConfig::default(),
            lengths: vec![1, 5, 10, 20],
            bases: vec![BaseKind::La, BaseKind::StandardNormal],
            s_samples: 20,
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub seed: u64,
    pub base: BaseKind,
    pub flow_length: usize,
    pub nll: f64,
    pub best_elbo: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationMedian {
    pub base: BaseKind,
    pub flow_length: usize,
    pub median_nll: f64,
    pub median_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub results_version: u32,
    pub config: AblationConfig,
    pub rows: Vec<AblationRow>,
    pub medians: Vec<AblationMedian>,
}

impl AblationResult {
    pub fn median_nll(&self, base: BaseKind, flow_length: usize) -> Option<f64> {
        self.medians.iter().find(|m| m.base == base && m.flow_length == flow_length).map(|m| m.median_nll)
    }

    pub fn write(&self, out: &mut OutputDir) -> Result<()> {
        out.write_csv(
            "ablation.csv",
            &["seed", "base", "flow_length", "nll", "best_elbo", "seconds"],
            self.rows.iter().map(|r| {
                vec![r.seed.to_string(), r.base.to_string(), r.flow_length.to_string(), fmt_f64(r.nll), fmt_f64(r.best_elbo), fmt_f64(r.seconds)]
            }),
        )?;
        out.write_json("results.json", self)
    }
}

/// Test NLL and refinement wall-clock per `(base, ℓ)`.
pub fn run_ablation(config: &AblationConfig) -> Result<AblationResult> {
    if config.lengths.is_empty() || config.bases.is_empty() || config.seeds.is_empty() || config.s_samples == 0 {
        return Err(Error::InvalidArgument("ablation needs lengths, bases, seeds and positive s-samples".into()));
    }
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let split = config.desk.split(seed)?;
        let labels = labels_of(&split.test)?;
        let base = fit_base(&config.desk, &split, seed)?;
        let target = LogJoint::new(&base.net, &base.lik, &split.train, base.lambda)?;
        let batches = Minibatcher::new(target, config.desk.batch_size)?;
        for &kind in &config.bases {
            let q0 = match kind {
                BaseKind::La => base.la.clone(),
                BaseKind::StandardNormal => GaussianPosterior::standard_normal(base.la.dim()),
            };
            for &l in &config.lengths {
                let started = Instant::now();
                let (rp, trace) = refine_minibatch(&q0, &batches, &config.desk.refine_config(&batches, l, seed))?;
                let seconds = started.elapsed().as_secs_f64();
                let (s, _) = rp.sample(config.s_samples, &mut RngStream::new(seed).split(40).generator());
                let probs = mc_predictive(&s, &base.net, &base.lik, &split.test.x)?.probs;
                rows.push(AblationRow { seed, base: kind, flow_length: l, nll: crate::metrics::nll(&probs, labels)?, best_elbo: trace.best_elbo, seconds });
            }
        }
    }
    let mut medians = Vec::new();
    for &kind in &config.bases {
        for &l in &config.lengths {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.base == kind && r.flow_length == l).collect();
            medians.push(AblationMedian {
                base: kind,
                flow_length: l,
                median_nll: median(&sel.iter().map(|r| r.nll).collect::<Vec<_>>()),
                median_seconds: median(&sel.iter().map(|r| r.seconds).collect::<Vec<_>>()),
            });
        }
    }
    Ok(AblationResult { results_version: RESULTS_VERSION, config: config.clone(), rows, medians })
}

/// Out-of-distribution inputs for the OOD command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OodSource {
    /// Clusters on feature axes unused by the in-distribution classes.
    Disjoint,
    /// The in-distribution test inputs themselves.
    Identical,
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodConfig {
    pub desk: DeskConfig,
    pub out: OodSource,
    pub methods: Vec<Method>,
    pub s_samples: usize,
    pub seeds: Vec<u64>,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            desk: DeskConfig::default(),
            out: OodSource::Disjoint,
            methods: vec![Method::Map, Method::La, Method::LaRefine(5)],
            s_samples: 20,
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OodRow {
    pub seed: u64,
    pub method: Method,
    pub fpr95: f64,
    pub mean_confidence_in: f64,
    pub mean_confidence_out: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OodResult {
    pub results_version: u32,
    pub config: OodConfig,
    pub rows: Vec<OodRow>,
    /// In-distribution metrics with the FPR95 attached.
    pub reports: Vec<MetricsReport>,
}

impl OodResult {
    pub fn fpr95(&self, method: Method, seed: u64) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method && r.seed == seed).map(|r| r.fpr95)
    }

    pub fn write(&self, out: &mut OutputDir) -> Result<()> {
        write_reports(out, "metrics.csv", &self.reports)?;
        out.write_json("results.json", self)
    }
}

/// OOD features matching the in-distribution test set in size.
fn ood_inputs(config: &OodConfig, split: &DeskSplit, seed: u64) -> Result<Matrix> {
    let x = match &config.out {
        OodSource::Identical => split.test.x.clone(),
        OodSource::Csv { path } => load_features_csv(path, None)?.x,
        OodSource::Disjoint => {
            let DataSource::Mixture { n_classes, n_features, separation, .. } = config.desk.data else {
                return Err(Error::InvalidArgument("disjoint OOD clusters need the mixture data source".into()));
            };
            let n = split.test.len() * n_classes;
            let all = gen_mixture_classes(2 * n_classes, n_features, 2 * n, separation, &mut RngStream::new(seed).split(50).generator())?;
            let labels = labels_of(&all)?;
            let idx: Vec<usize> = (0..all.len()).filter(|&i| labels[i] >= n_classes).take(split.test.len()).collect();
            all.subset(&idx).x
        }
    };
    check_len("ood features", split.test.n_features(), x.cols())?;
    Ok(x)
}

/// FPR95 of max-probability scores, in-distribution test set against OOD inputs.
pub fn run_ood(config: &OodConfig) -> Result<OodResult> {
    check_methods(&config.methods, &config.seeds)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &seed in &config.seeds {
        let split = config.desk.split(seed)?;
        let labels = labels_of(&split.test)?;
        let x_out = ood_inputs(config, &split, seed)?;
        let base = fit_base(&config.desk, &split, seed)?;
        let hmc = if config.methods.contains(&Method::Hmc) { Some(run_hmc(&config.desk, &split, &base, seed)?) } else { None };
        let ctx = SeedContext { seed, config: &config.desk, split: &split, base: &base, hmc: hmc.as_ref() };
        for &method in &config.methods {
            let (fitted, _) = ctx.fit(method)?;
            let draws = ctx.draws(method, &fitted, config.s_samples, 0)?;
            let p_in = ctx.probs(&fitted, draws.as_ref(), &split.test.x)?;
            let p_out = ctx.probs(&fitted, draws.as_ref(), &x_out)?;
            let conf = |p: &Matrix| -> Vec<f64> { p.iter_rows().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect() };
            let (c_in, c_out) = (conf(&p_in), conf(&p_out));
            let f = fpr95(&c_in, &c_out)?;
            let mut report = MetricsReport::evaluate(&method.to_string(), seed, draws.as_ref().map(|d| d.len()), &p_in, labels)?;
            report.fpr95 = Some(f);
            reports.push(report);
            rows.push(OodRow {
                seed,
                method,
                fpr95: f,
                mean_confidence_in: crate::numeric::sum::mean(&c_in),
                mean_confidence_out: crate::numeric::sum::mean(&c_out),
            });
        }
    }
    Ok(OodResult { results_version: RESULTS_VERSION, config: config.clone(), rows, reports })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineCmdConfig {
    pub desk: DeskConfig,
    pub flow_length: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub in_posterior: Option<PathBuf>,
    pub s_samples: usize,
}

impl Default for RefineCmdConfig {
    fn default() -> Self {
        Self { desk: DeskConfig::default(), flow_length: 5, epochs: 20, lr: 0.001, seed: 0, in_posterior: None, s_samples: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineCmdResult {
    pub results_version: u32,
    pub config: RefineCmdConfig,
    pub lambda: f64,
    pub base_metrics: MetricsReport,
    pub refined_metrics: MetricsReport,
    pub trace: ElboTrace,
    #[serde(skip)]
    pub base: Option<GaussianPosterior>,
    #[serde(skip)]
    pub refined: Option<RefinedPosterior>,
}

/// Fits (or loads) the Laplace base, refines it and scores both on the test split
/// with the same base noise.
pub fn run_refine(config: &RefineCmdConfig) -> Result<RefineCmdResult> {
    if config.s_samples == 0 {
        return Err(Error::InvalidArgument("s-samples must be positive".into()));
    }
    let desk = DeskConfig { refine: RefineConfig { epochs: config.epochs, lr: config.lr, ..config.desk.refine }, ..config.desk.clone() };
    let seed = config.seed;
    let split = desk.split(seed)?;
    let labels = labels_of(&split.test)?;
    let net = SoftmaxLinearModel::new(split.train.n_features(), split.train.n_classes, true);
    let lik = Likelihood::Categorical;
    let (la, lambda) = match &config.in_posterior {
        Some(path) => {
            let file = load_posterior(path)?;
            if file.kind != PosteriorKind::Gaussian {
                return Err(Error::InvalidArgument("refine needs a gaussian base posterior".into()));
            }
            let g = file.gaussian()?;
            check_len("base posterior", net.n_params(), g.dim())?;
            let lambda = g.prior_precision;
            (g, lambda)
        }
        None => {
            let b = fit_base(&desk, &split, seed)?;
            (b.la, b.lambda)
        }
    };
    let target = LogJoint::new(&net, &lik, &split.train, lambda)?;
    let batches = Minibatcher::new(target, desk.batch_size)?;
    let (rp, trace) = refine_minibatch(&la, &batches, &desk.refine_config(&batches, config.flow_length, seed))?;
    let stream = RngStream::new(seed).split(30).split(draw_key(Method::La));
    let base_draws = la.sample(config.s_samples, &mut stream.generator())?;
    let (ref_draws, _) = rp.sample(config.s_samples, &mut stream.generator());
    let base_probs = mc_predictive(&base_draws, &net, &lik, &split.test.x)?.probs;
    let ref_probs = mc_predictive(&ref_draws, &net, &lik, &split.test.x)?.probs;
    Ok(RefineCmdResult {
        results_version: RESULTS_VERSION,
        config: config.clone(),
        lambda,
        base_metrics: MetricsReport::evaluate("la", seed, Some(config.s_samples), &base_probs, labels)?,
        refined_metrics: MetricsReport::evaluate(&Method::LaRefine(config.flow_length).to_string(), seed, Some(config.s_samples), &ref_probs, labels)?,
        trace,
        base: Some(la),
        refined: Some(rp),
    })
}

impl RefineCmdResult {
    /// Writes `base_posterior.json`, `refined_posterior.json`, `metrics.csv` and `results.json`.
    pub fn write(&self, out: &mut OutputDir) -> Result<()> {
        if let Some(b) = &self.base {
            save_posterior(&out.artifact("base_posterior.json"), &PosteriorFile::from_gaussian(b))?;
        }
        if let Some(r) = &self.refined {
            save_posterior(&out.artifact("refined_posterior.json"), &PosteriorFile::from_refined(r))?;
        }
        write_reports(out, "metrics.csv", &[self.base_metrics.clone(), self.refined_metrics.clone()])?;
        out.write_json("results.json", self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_desk() -> DeskConfig {
        DeskConfig {
            data: DataSource::Mixture { n_classes: 3, n_features: 4, n: 300, separation: 3.0 },
            refine: RefineConfig { epochs: 2, n_mc: 4, eval_samples: 8, ..DeskConfig::default().refine },
            hmc: HmcConfig { n_chains: 2, n_warmup: 50, n_samples: 40, n_leapfrog: 4, target_accept: 0.8, seed: 0 },
            hmc_thin: 1,
            ..Default::default()
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Map, Method::MapTemp, Method::La, Method::LaRefine(5), Method::Vb, Method::Hmc] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!(matches!("la-refine-x".parse::<Method>(), Err(Error::InvalidArgument(_))));
        assert!("sgld".parse::<Method>().is_err());
        assert_eq!(serde_json::to_string(&Method::LaRefine(10)).unwrap(), "\"la-refine-10\"");
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let s = small_desk().split(0).unwrap();
        assert_eq!(s.test.len(), 60);
        assert_eq!(s.train.len() + s.val.len(), 240);
        assert_eq!(s.val.len(), 24);
    }

    #[test]
    fn compare_rows_and_mmd_fields() {
        let cfg = CompareConfig { desk: small_desk(), ..Default::default() };
        let r = run_compare(&cfg).unwrap();
        assert_eq!(r.rows.len(), 6);
        let map = r.row(Method::Map, 0).unwrap();
        assert!(map.mmd.is_none() && map.s.is_none());
        assert!(r.row(Method::MapTemp, 0).unwrap().mmd.is_none());
        assert_eq!(r.row(Method::La, 0).unwrap().s, Some(20));
        assert_eq!(r.row(Method::Hmc, 0).unwrap().s, Some(80));
        assert!(r.row(Method::Vb, 0).unwrap().mmd.unwrap() >= 0.0);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["rows"][0].get("mmd").is_none());
        assert_eq!(run_compare(&cfg).unwrap().rows, r.rows);
    }

    #[test]
    fn identical_ood_sets_give_fpr_near_095() {
        let cfg = OodConfig { desk: small_desk(), out: OodSource::Identical, methods: vec![Method::Map], ..Default::default() };
        let r = run_ood(&cfg).unwrap();
        assert!((r.rows[0].fpr95 - 0.95).abs() <= 0.05, "{}", r.rows[0].fpr95);
    }

    #[test]
    fn zero_epoch_refine_matches_base_metrics() {
        let cfg = RefineCmdConfig { desk: small_desk(), epochs: 0, ..Default::default() };
        let r = run_refine(&cfg).unwrap();
        for (a, b) in [
            (r.base_metrics.nll, r.refined_metrics.nll),
            (r.base_metrics.ece, r.refined_metrics.ece),
            (r.base_metrics.brier, r.refined_metrics.brier),
        ] {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn ablation_reports_every_cell() {
        let cfg = AblationConfig { desk: small_desk(), lengths: vec![1, 2], ..Default::default() };
        let r = run_ablation(&cfg).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(r.median_nll(BaseKind::StandardNormal, 2).unwrap().is_finite());
    }
}
