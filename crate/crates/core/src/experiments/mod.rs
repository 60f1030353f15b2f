//! Monte Carlo studies and demos, plus the small statistics and CSV helpers
//! they share.
//!
//! Every run draws its randomness from streams keyed by `(seed, n, replicate)`
//! and results are collected in key order, so output does not depend on how
//! rayon schedules the work.

mod demos;
mod studies;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral_model::SignalKind;
use crate::tikhonov::Space;

pub use demos::{
    enkf_run, linear_demo, nonlinear_demo, CoefficientRow, EnkfRunConfig, EnkfRunReport, GridRow,
    InitKind, LinearCellSummary, LinearDemoConfig, LinearDemoReport, NonlinearDemoConfig,
    NonlinearDemoReport, NonlinearNoiseSummary, NonlinearRunSummary, ResidualRow,
};
pub use studies::{
    contraction_report, contraction_study, coverage_report, coverage_study, rate_report,
    rate_study, simulate_runs, stopping_report, stopping_time_study, RunRow, StudyKind,
    StudyReport, SummaryRow,
};

/// Credible-ball settings for the coverage study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageSettings {
    /// Posterior draws used to estimate the credible radius.
    pub draws: usize,
    pub level: f64,
    /// Coverage signals are `i^{-1-2 beta'}` with `beta' = beta + beta_shift`.
    pub beta_shift: f64,
}

impl Default for CoverageSettings {
    fn default() -> Self {
        CoverageSettings {
            draws: 10_000,
            level: 0.95,
            beta_shift: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub p: f64,
    pub alpha: f64,
    pub beta: f64,
    pub n_grid: Vec<u64>,
    pub replicates: usize,
    #[serde(rename = "C")]
    pub c: f64,
    pub seed: u64,
    pub nu: f64,
    pub signal_kind: SignalKind,
    pub signal_scale: f64,
    /// Whether signal coefficients describe `theta` or `L theta`.
    pub signal_space: Space,
    pub drop_smallest_n: bool,
    /// Quantile of `tau_dp / n^e` at the smallest `n` used as `c0`.
    pub c0_quantile: f64,
    pub coverage: CoverageSettings,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            p: 0.5,
            alpha: 1.0,
            beta: 1.0,
            n_grid: vec![1 << 8, 1 << 10, 1 << 12, 1 << 14, 1 << 16],
            replicates: 50,
            c: 1.0,
            seed: 0,
            nu: 1.0,
            signal_kind: SignalKind::Power,
            signal_scale: 1.0,
            signal_space: Space::ThetaTilde,
            drop_smallest_n: false,
            c0_quantile: 0.1,
            coverage: CoverageSettings::default(),
        }
    }
}

/// A config value that parses but is out of range.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("`{key}` {reason}")]
pub struct ValidationError {
    pub key: String,
    pub reason: String,
}

pub(crate) fn bad(key: &str, reason: impl Into<String>) -> ValidationError {
    ValidationError {
        key: key.to_owned(),
        reason: reason.into(),
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if !(self.p > 0.0 && self.p.is_finite()) {
            return Err(bad("p", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(bad("alpha", "must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(bad("beta", "must be non-negative"));
        }
        if self.n_grid.is_empty() || self.n_grid[0] == 0 {
            return Err(bad(
                "n_grid",
                "must be a non-empty list of positive integers",
            ));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("n_grid", "must be strictly increasing"));
        }
        if self.replicates == 0 {
            return Err(bad("replicates", "must be at least 1"));
        }
        if !(self.c > 0.0 && self.c <= 1.0) {
            return Err(bad("C", "must lie in (0, 1]"));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(bad("nu", "must be positive"));
        }
        if !(self.signal_scale.is_finite() && self.signal_scale != 0.0) {
            return Err(bad("signal_scale", "must be finite and non-zero"));
        }
        if !(self.c0_quantile > 0.0 && self.c0_quantile < 1.0) {
            return Err(bad("c0_quantile", "must lie in (0, 1)"));
        }
        let cov = &self.coverage;
        if cov.draws < 2 {
            return Err(bad("coverage.draws", "must be at least 2"));
        }
        if !(cov.level > 0.0 && cov.level < 1.0) {
            return Err(bad("coverage.level", "must lie in (0, 1)"));
        }
        if !(cov.beta_shift > 0.0 && cov.beta_shift.is_finite()) {
            return Err(bad("coverage.beta_shift", "must be positive"));
        }
        Ok(())
    }
}

/// Linear interpolation between order statistics (Hyndman-Fan type 7).
/// `sorted` must be non-empty and sorted ascending.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Ordinary least-squares line `y = intercept + slope x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; absent with fewer than three points.
    pub slope_stderr: Option<f64>,
    pub points: usize,
}

pub fn ols(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_stderr = (n > 2).then(|| {
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| (b - intercept - slope * a).powi(2))
            .sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    });
    Some(LineFit {
        slope,
        intercept,
        slope_stderr,
        points: n,
    })
}

/// A CSV row type with a fixed column list.
pub trait CsvRecord: Serialize {
    const HEADER: &'static [&'static str];
}

/// Writes `rows` after a header row; the header is emitted even for no rows.
pub fn write_csv<T: CsvRecord>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(File::create(path)?));
    w.write_record(T::HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a single JSON document followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn quantile_matches_type_seven() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_relative_eq!(quantile(&v, 0.5), 2.5);
        assert_relative_eq!(quantile(&[3.0, 1.0, 2.0], 0.25), 1.5);
        assert_eq!(quantile(&[7.0], 0.9), 7.0);
    }

    #[test]
    fn ols_recovers_a_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = ols(&x, &y).unwrap();
        assert_relative_eq!(f.slope, -0.5, epsilon = 1e-14);
        assert_relative_eq!(f.intercept, 2.0, epsilon = 1e-14);
        assert!(f.slope_stderr.unwrap() < 1e-12);
        assert!(ols(&[1.0], &[1.0]).is_none());
        assert!(ols(&[1.0, 2.0], &[1.0, 5.0])
            .unwrap()
            .slope_stderr
            .is_none());
    }

    #[test]
    fn default_config_is_valid() {
        StudyConfig::default().validate().unwrap();
        let bad_grid = StudyConfig {
            n_grid: vec![4, 4],
            ..StudyConfig::default()
        };
        assert!(bad_grid.validate().is_err());
    }

    #[test]
    fn csv_header_survives_empty_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        write_csv::<ResidualRow>(&path, &[]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            ResidualRow::HEADER.join(",") + "\n"
        );
    }

    /// Header that serde derives from a row's field names.
    pub(crate) fn serde_header<T: Serialize>(row: &T) -> Vec<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(row).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        text.lines()
            .next()
            .unwrap()
            .split(',')
            .map(str::to_owned)
            .collect()
    }

    proptest! {
        #[test]
        fn quantile_is_monotone_and_bounded(v in proptest::collection::vec(-1e3f64..1e3, 1..50), q1 in 0.0f64..1.0, q2 in 0.0f64..1.0) {
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            let (a, b) = (quantile(&v, lo), quantile(&v, hi));
            prop_assert!(a <= b);
            let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min <= a && b <= max);
        }
    }
}
