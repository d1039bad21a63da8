//! MC versus probit error surfaces for the logistic-Gaussian integral.

use serde::{Deserialize, Serialize};

use super::{fmt_f64, OutputDir, RESULTS_VERSION};
use crate::error::{Error, Result};
use crate::numeric::RngStream;
use crate::predictive::{linspace, mc_error_grid, ErrorGrid, GridMax};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McGridConfig {
    pub s_samples: usize,
    pub m_range: (f64, f64),
    pub s_range: (f64, f64),
    /// Points per axis.
    pub grid: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for McGridConfig {
    fn default() -> Self {
        Self { s_samples: 100, m_range: (-5.0, 5.0), s_range: (0.1, 10.0), grid: 50, repeats: 10, seed: 0 }
    }
}

impl McGridConfig {
    pub fn validate(&self) -> Result<()> {
        let (m0, m1) = self.m_range;
        let (s0, s1) = self.s_range;
        if !(m0.is_finite() && m1.is_finite() && m0 <= m1) {
            return Err(Error::InvalidArgument(format!("invalid m range [{m0}, {m1}]")));
        }
        if !(s0 > 0.0 && s1.is_finite() && s0 <= s1) {
            return Err(Error::InvalidArgument(format!("invalid s range [{s0}, {s1}]; need 0 < lo <= hi")));
        }
        if self.grid == 0 || self.s_samples == 0 || self.repeats == 0 {
            return Err(Error::InvalidArgument("grid, s-samples and repeats must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McGridSummary {
    pub results_version: u32,
    pub config: McGridConfig,
    /// Largest error of any single MC run over all cells and repeats.
    pub max_mc_error: GridMax,
    /// Largest repeat-averaged MC error.
    pub max_mean_mc_error: GridMax,
    pub max_probit_error: GridMax,
}

pub fn run_mc_grid(config: &McGridConfig) -> Result<(ErrorGrid, McGridSummary)> {
    config.validate()?;
    let m = linspace(config.m_range.0, config.m_range.1, config.grid);
    let s = linspace(config.s_range.0, config.s_range.1, config.grid);
    let grid = mc_error_grid(&m, &s, config.s_samples, config.repeats, RngStream::new(config.seed))?;
    let summary = McGridSummary {
        results_version: RESULTS_VERSION,
        config: *config,
        max_mc_error: grid.max_mc_error(),
        max_mean_mc_error: grid.max_mean_mc_error(),
        max_probit_error: grid.max_probit_error(),
    };
    Ok((grid, summary))
}

impl McGridSummary {
    /// Writes `mc_error.csv`, `probit_error.csv` and `summary.json`.
    pub fn write(&self, grid: &ErrorGrid, out: &mut OutputDir) -> Result<()> {
        let cells = || {
            grid.m_values
                .iter()
                .enumerate()
                .flat_map(|(i, m)| grid.s_values.iter().enumerate().map(move |(j, s)| (i, j, *m, *s)))
        };
        out.write_csv(
            "mc_error.csv",
            &["m", "s", "reference", "mc_mean_error", "mc_max_error"],
            cells().map(|(i, j, m, s)| {
                vec![fmt_f64(m), fmt_f64(s), fmt_f64(grid.reference[(i, j)]), fmt_f64(grid.mc_mean[(i, j)]), fmt_f64(grid.mc_max[(i, j)])]
            }),
        )?;
        out.write_csv(
            "probit_error.csv",
            &["m", "s", "reference", "probit_error"],
            cells().map(|(i, j, m, s)| vec![fmt_f64(m), fmt_f64(s), fmt_f64(grid.reference[(i, j)]), fmt_f64(grid.probit[(i, j)])]),
        )?;
        out.write_json("summary.json", self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_ranges() {
        for cfg in [
            McGridConfig { m_range: (1.0, -1.0), ..Default::default() },
            McGridConfig { s_range: (0.0, 1.0), ..Default::default() },
            McGridConfig { s_range: (1.0, f64::NAN), ..Default::default() },
            McGridConfig { grid: 0, ..Default::default() },
        ] {
            assert!(matches!(run_mc_grid(&cfg), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn small_grid_is_deterministic() {
        let cfg = McGridConfig { grid: 4, repeats: 3, ..Default::default() };
        let (g1, s1) = run_mc_grid(&cfg).unwrap();
        let (g2, s2) = run_mc_grid(&cfg).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(s1, s2);
        assert!(s1.max_mc_error.value >= s1.max_mean_mc_error.value);
    }
}
