//! Experiment drivers behind the command-line subcommands.
//!
//! Every driver is a plain function returning serializable results; the
//! [`OutputDir`] helper writes artifacts and the [`RunManifest`] that lists them.

mod analytic;
mod desk;
mod mc_grid;
mod toy2d;

pub use analytic::{
    load_regression_csv, run_mc_vs_analytic, AnalyticConfig, AnalyticResult, ClassificationGridRow, Disagreement,
    LinearControl, PrecisionKind, RegressionRow,
};
pub use desk::{
    fit_base, run_ablation, run_compare, run_hmc, run_ood, run_refine, AblationConfig, AblationMedian, AblationResult,
    AblationRow, BaseKind, CompareConfig, CompareResult, DataSource, DeskConfig, DeskSplit, FittedBase, HmcRun,
    Method, MethodDiagnostics, OodConfig, OodResult, OodRow, OodSource, RefineCmdConfig, RefineCmdResult,
};
pub use mc_grid::{run_mc_grid, McGridConfig, McGridSummary};
pub use toy2d::{kde_grid, run_toy_2d, HmcDiagnostics, KdeGrid, MethodMedian, Toy2dConfig, Toy2dResult, Toy2dRow};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};

/// Version of every results JSON document and of the shipped schema.
pub const RESULTS_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Median of a non-empty list (mean of the middle pair for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Shortest round-trip decimal form, used for every CSV cell.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// A run's output directory plus the list of files written into it.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Path for `name` inside the directory, recorded as an artifact.
    pub fn artifact(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.root.join(name)
    }

    pub fn artifacts(&self) -> &[String] {
        &self.written
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.artifact(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn write_csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let path = self.artifact(name);
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        for row in rows {
            if row.len() != header.len() {
                return Err(Error::DimensionMismatch { context: "csv row", expected: header.len(), found: row.len() });
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
}

/// One per run, written next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub results_version: u32,
    pub subcommand: String,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorRecord>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
    pub library_version: String,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: serde_json::Value, seeds: Vec<u64>) -> Self {
        Self {
            results_version: RESULTS_VERSION,
            subcommand: subcommand.to_string(),
            status: RunStatus::Ok,
            error: None,
            config,
            seeds,
            artifacts: Vec::new(),
            wall_clock_seconds: 0.0,
            library_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Writes the manifest for a finished (or failed) run into `dir`.
    pub fn finish(mut self, dir: &Path, started: Instant, artifacts: &[String], outcome: &Result<()>) -> Result<Self> {
        self.wall_clock_seconds = started.elapsed().as_secs_f64();
        self.artifacts = artifacts.to_vec();
        if let Err(e) = outcome {
            self.status = RunStatus::Failed;
            self.error = Some(ErrorRecord { kind: e.kind().to_string(), message: e.to_string() });
        }
        fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(self)
    }
}
