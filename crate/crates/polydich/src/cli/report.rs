//! Run reports, plot-data series and their serialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::spectrum::ResolventSample;

/// Echo of the effective run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub system: String,
    pub window: i64,
    pub grid_step: f64,
    pub tol: f64,
    pub horizon: usize,
    pub r_grid: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub format: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<String>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(8..=1 << 20).contains(&self.window) {
            return Err(Error::Config(format!(
                "window {} outside [8, 2^20]",
                self.window
            )));
        }
        if !(self.grid_step > 0.0 && self.grid_step <= 0.01) {
            return Err(Error::Config(format!(
                "grid step {} outside (0, 0.01]",
                self.grid_step
            )));
        }
        if !(self.tol > 0.0 && self.tol <= 1e-2) {
            return Err(Error::Config(format!("tol {} outside (0, 1e-2]", self.tol)));
        }
        if self.horizon < 16 {
            return Err(Error::Config(format!("horizon {} below 16", self.horizon)));
        }
        if !(self.r_grid > 0.0 && self.r_grid <= 10.0) {
            return Err(Error::Config(format!(
                "grid radius {} outside (0, 10]",
                self.r_grid
            )));
        }
        if self.max_iter == 0 || self.max_iter > 10_000 {
            return Err(Error::Config(format!(
                "max iterations {} outside [1, 10000]",
                self.max_iter
            )));
        }
        Ok(())
    }
}

/// The full JSON report of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub config: RunConfig,
    /// SHA-256 over the canonical config echo and the system definition;
    /// identical inputs always hash identically.
    pub input_hash: String,
    pub stages: serde_json::Map<String, serde_json::Value>,
    /// Wall-clock seconds; excluded from the hash.
    pub timing_seconds: f64,
}

impl RunReport {
    pub fn new(config: RunConfig, system_definition: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(&config).expect("config serializes").as_bytes());
        hasher.update(b"\x00");
        hasher.update(system_definition.as_bytes());
        RunReport {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            input_hash: hex::encode(hasher.finalize()),
            stages: serde_json::Map::new(),
            timing_seconds: 0.0,
        }
    }

    pub fn record(&mut self, stage: &str, value: impl Serialize) {
        self.stages.insert(
            stage.to_string(),
            serde_json::to_value(value).expect("stage report serializes"),
        );
    }
}

/// Numeric series a run can export as CSV.
#[derive(Debug, Clone, Default)]
pub struct PlotData {
    pub resolvent: Option<Vec<ResolventSample>>,
    /// Rows `(k, step residual, orbit residual)`.
    pub residuals: Option<Vec<(i64, f64, f64)>>,
    /// Rows `(n, C_n)` with `C_n = max |x|_n / |x|` over sample vectors.
    pub norms: Option<Vec<(i64, f64)>>,
    /// Rows `(m, n, ratio_stable, ratio_unstable, growth_fwd, growth_bwd)`.
    pub pair_ratios: Option<Vec<(i64, i64, f64, f64, f64, f64)>>,
}

/// A finished run: report plus exportable series.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub plots: PlotData,
    /// Set by the demo when a paper fixture disagrees with the computed
    /// values; maps to exit code 4.
    pub fixture_mismatch: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotSeries {
    Resolvent,
    Residuals,
    Norms,
}

/// 17 significant digits, round-trip safe.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the requested series in its documented CSV schema.
pub fn emit_plot_data(output: &RunOutput, what: PlotSeries, path: &Path) -> Result<PathBuf> {
    let mut text = String::new();
    match what {
        PlotSeries::Resolvent => {
            let rows = output
                .plots
                .resolvent
                .as_ref()
                .ok_or_else(|| Error::NotAvailable {
                    series: "resolvent".into(),
                })?;
            text.push_str("tau,verdict,lambda_fit,K_fit\n");
            for s in rows {
                text.push_str(&format!(
                    "{},{},{},{}\n",
                    fmt_f64(s.value),
                    if s.accepted { "accepted" } else { "rejected" },
                    fmt_f64(s.lambda_fit),
                    fmt_f64(s.k_fit)
                ));
            }
        }
        PlotSeries::Residuals => {
            let rows = output
                .plots
                .residuals
                .as_ref()
                .ok_or_else(|| Error::NotAvailable {
                    series: "residuals".into(),
                })?;
            text.push_str("k,max_residual,orbit_residual\n");
            for (k, step, orbit) in rows {
                text.push_str(&format!("{k},{},{}\n", fmt_f64(*step), fmt_f64(*orbit)));
            }
        }
        PlotSeries::Norms => {
            let rows = output
                .plots
                .norms
                .as_ref()
                .ok_or_else(|| Error::NotAvailable {
                    series: "norms".into(),
                })?;
            text.push_str("n,C_n\n");
            for (n, c) in rows {
                text.push_str(&format!("{n},{}\n", fmt_f64(*c)));
            }
        }
    }
    std::fs::write(path, text)?;
    Ok(path.to_path_buf())
}

/// Writes the per-pair dichotomy ratio table.
pub fn emit_pair_ratios(output: &RunOutput, path: &Path) -> Result<PathBuf> {
    let rows = output
        .plots
        .pair_ratios
        .as_ref()
        .ok_or_else(|| Error::NotAvailable {
            series: "pair_ratios".into(),
        })?;
    let mut text =
        String::from("m,n,ratio_stable,ratio_unstable,ratio_growth_fwd,ratio_growth_bwd\n");
    for (m, n, rs, ru, rf, rb) in rows {
        text.push_str(&format!(
            "{m},{n},{},{},{},{}\n",
            fmt_f64(*rs),
            fmt_f64(*ru),
            fmt_f64(*rf),
            fmt_f64(*rb)
        ));
    }
    std::fs::write(path, text)?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> RunConfig {
        RunConfig {
            command: "spectrum".into(),
            system: "builtin:example_4_3".into(),
            window: 4096,
            grid_step: 1e-3,
            tol: 1e-8,
            horizon: 4096,
            r_grid: 1.0,
            max_iter: 64,
            seed: 0,
            format: "json".into(),
            perturbation: None,
        }
    }

    #[test]
    fn hash_is_deterministic_and_input_sensitive() {
        let a = RunReport::new(config(), "sysdef");
        let b = RunReport::new(config(), "sysdef");
        assert_eq!(a.input_hash, b.input_hash);
        let c = RunReport::new(config(), "other");
        assert_ne!(a.input_hash, c.input_hash);
        let mut changed = config();
        changed.seed = 1;
        let d = RunReport::new(changed, "sysdef");
        assert_ne!(a.input_hash, d.input_hash);
    }

    #[test]
    fn config_ranges_enforced() {
        let mut c = config();
        assert!(c.validate().is_ok());
        c.grid_step = 0.5;
        assert!(c.validate().is_err());
        c.grid_step = 1e-3;
        c.window = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn missing_series_is_reported() {
        let out = RunOutput {
            report: RunReport::new(config(), "x"),
            plots: PlotData::default(),
            fixture_mismatch: None,
        };
        let tmp = std::env::temp_dir().join("polydich_missing.csv");
        assert!(matches!(
            emit_plot_data(&out, PlotSeries::Norms, &tmp),
            Err(Error::NotAvailable { .. })
        ));
    }

    #[test]
    fn seventeen_significant_digits() {
        let s = fmt_f64(std::f64::consts::PI);
        assert_eq!(s, "3.1415926535897931e0");
        let back: f64 = s.parse().unwrap();
        assert_eq!(back, std::f64::consts::PI);
    }
}
