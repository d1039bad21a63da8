//! Command-line entry point: one subcommand per experiment, each writing its
//! artifacts plus a `manifest.json` into `--out`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use laflow::experiments::{
    run_ablation, run_compare, run_mc_grid, run_mc_vs_analytic, run_ood, run_refine, run_toy_2d, AblationConfig,
    AnalyticConfig, BaseKind, CompareConfig, DataSource, DeskConfig, McGridConfig, Method, OodConfig, OodSource,
    OutputDir, RefineCmdConfig, RunManifest, Toy2dConfig,
};
use laflow::Result;

#[derive(Parser, Debug)]
#[command(name = "laflow", version, about = "Flow refinement of Laplace posteriors and predictive-quality experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// MC and probit error surfaces of the logistic-Gaussian integral.
    McGrid(McGridArgs),
    /// LA, VB, refined LA and HMC on the two-feature logistic toy.
    #[command(name = "toy-2d")]
    Toy2d(Toy2dArgs),
    /// Fit (or load) a Laplace base and refine it.
    Refine(RefineArgs),
    /// Calibration metrics of several methods on one task.
    Compare(CompareArgs),
    /// Flow length and base distribution ablation.
    AblateFlow(AblateArgs),
    /// FPR95 of max-probability OOD scores.
    Ood(OodArgs),
    /// MC against linearized and probit predictives.
    McVsAnalytic(AnalyticArgs),
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',').map(|p| p.trim().parse::<T>().map_err(|e| format!("'{p}': {e}"))).collect()
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    match parse_list::<f64>(s)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(format!("expected 'lo,hi', got '{s}'")),
    }
}

#[derive(Args, Debug)]
struct McGridArgs {
    #[arg(long, default_value_t = 100)]
    s_samples: usize,
    #[arg(long, default_value = "-5,5", value_parser = parse_pair, allow_hyphen_values = true)]
    m_range: (f64, f64),
    #[arg(long, default_value = "0.1,10", value_parser = parse_pair, allow_hyphen_values = true)]
    s_range: (f64, f64),
    /// Points per axis.
    #[arg(long, default_value_t = 50)]
    grid: usize,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Toy2dArgs {
    #[arg(long, default_value = "1,5,10", value_delimiter = ',')]
    flow_lengths: Vec<usize>,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0", value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Feature data for the classification commands.
#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// `mixture` for the synthetic generator, or a feature CSV path.
    #[arg(long, default_value = "mixture")]
    data: String,
    /// Test CSV; without it the data is split.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    features: usize,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 3.5)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Comma-separated prior precisions searched by validation NLL.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
}

impl DataArgs {
    fn desk(&self) -> DeskConfig {
        let data = if self.data == "mixture" {
            DataSource::Mixture { n_classes: self.classes, n_features: self.features, n: self.n, separation: self.separation }
        } else {
            DataSource::Csv { train: PathBuf::from(&self.data), test: self.test_data.clone() }
        };
        DeskConfig { data, lambda: self.lambda, lambda_grid: self.lambda_grid.clone(), ..Default::default() }
    }
}

#[derive(Args, Debug)]
struct RefineArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 5)]
    flow_length: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gaussian posterior file used as the base instead of a fresh Laplace fit.
    #[arg(long)]
    in_posterior: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    s_samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "map,map-temp,la,la-refine-5,vb,hmc", value_delimiter = ',')]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 20)]
    s_samples: usize,
    #[arg(long, default_value = "0", value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "1,5,10,20", value_delimiter = ',')]
    lengths: Vec<usize>,
    #[arg(long, default_value = "la,standard-normal", value_delimiter = ',')]
    base: Vec<BaseKind>,
    #[arg(long, default_value_t = 20)]
    s_samples: usize,
    #[arg(long, default_value = "0", value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct OodArgs {
    /// `mixture` or an in-distribution feature CSV.
    #[arg(long, default_value = "mixture")]
    in_data: String,
    /// `disjoint`, `identical`, or an OOD feature CSV.
    #[arg(long, default_value = "disjoint")]
    out_data: String,
    #[arg(long, default_value = "map,la,la-refine-5", value_delimiter = ',')]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 20)]
    s_samples: usize,
    #[arg(long, default_value = "0", value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    features: usize,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 3.5)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AnalyticArgs {
    /// `toy` for the generator, or a regression CSV (`x,y`).
    #[arg(long, default_value = "toy")]
    data: String,
    /// Points per axis of the classification grid.
    #[arg(long, default_value_t = 50)]
    grid2d: usize,
    #[arg(long, default_value_t = 10_000)]
    s_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Runs `body` into `out` and always writes a manifest, marking failures.
fn execute<C: Serialize>(name: &str, config: &C, seeds: Vec<u64>, out: &Path, body: impl FnOnce(&mut OutputDir) -> Result<()>) -> Result<()> {
    let started = Instant::now();
    let manifest = RunManifest::new(name, serde_json::to_value(config)?, seeds);
    let mut dir = OutputDir::create(out)?;
    let outcome = body(&mut dir);
    manifest.finish(out, started, dir.artifacts(), &outcome)?;
    outcome
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::McGrid(a) => {
            let cfg = McGridConfig { s_samples: a.s_samples, m_range: a.m_range, s_range: a.s_range, grid: a.grid, repeats: a.repeats, seed: a.seed };
            execute("mc-grid", &cfg, vec![a.seed], &a.out, |dir| {
                let (grid, summary) = run_mc_grid(&cfg)?;
                summary.write(&grid, dir)
            })
        }
        Command::Toy2d(a) => {
            let cfg = Toy2dConfig { flow_lengths: a.flow_lengths, seeds: a.seed.clone(), lambda: a.lambda, ..Default::default() };
            execute("toy-2d", &cfg, a.seed, &a.out, |dir| run_toy_2d(&cfg)?.write(dir))
        }
        Command::Refine(a) => {
            let cfg = RefineCmdConfig {
                desk: a.data.desk(),
                flow_length: a.flow_length,
                epochs: a.epochs,
                lr: a.lr,
                seed: a.seed,
                in_posterior: a.in_posterior,
                s_samples: a.s_samples,
            };
            execute("refine", &cfg, vec![a.seed], &a.out, |dir| run_refine(&cfg)?.write(dir))
        }
        Command::Compare(a) => {
            let cfg = CompareConfig { desk: a.data.desk(), methods: a.methods, s_samples: a.s_samples, seeds: a.seed.clone() };
            execute("compare", &cfg, a.seed, &a.out, |dir| run_compare(&cfg)?.write(dir))
        }
        Command::AblateFlow(a) => {
            let cfg = AblationConfig { desk: a.data.desk(), lengths: a.lengths, bases: a.base, s_samples: a.s_samples, seeds: a.seed.clone() };
            execute("ablate-flow", &cfg, a.seed, &a.out, |dir| run_ablation(&cfg)?.write(dir))
        }
        Command::Ood(a) => {
            let data = DataArgs {
                data: a.in_data,
                test_data: None,
                classes: a.classes,
                features: a.features,
                n: a.n,
                separation: a.separation,
                lambda: a.lambda,
                lambda_grid: None,
            };
            let out_source = match a.out_data.as_str() {
                "disjoint" => OodSource::Disjoint,
                "identical" => OodSource::Identical,
                path => OodSource::Csv { path: PathBuf::from(path) },
            };
            let cfg = OodConfig { desk: data.desk(), out: out_source, methods: a.methods, s_samples: a.s_samples, seeds: a.seed.clone() };
            execute("ood", &cfg, a.seed, &a.out, |dir| run_ood(&cfg)?.write(dir))
        }
        Command::McVsAnalytic(a) => {
            let data = if a.data == "toy" { None } else { Some(PathBuf::from(&a.data)) };
            let cfg = AnalyticConfig { data, grid2d: a.grid2d, mc_samples: a.s_samples, seed: a.seed, ..Default::default() };
            execute("mc-vs-analytic", &cfg, vec![a.seed], &a.out, |dir| run_mc_vs_analytic(&cfg)?.write(dir))
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: kind=usage; message={}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={}; message={}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
