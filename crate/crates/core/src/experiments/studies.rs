use rayon::prelude::*;
use serde::Serialize;

use super::{mean, ols, quantile, quantile_sorted, CsvRecord, LineFit, StudyConfig};
use crate::error::{invalid, Result};
use crate::rng::{self, purpose};
use crate::spectral_model::{
    generate_observation, make_model, test_signal, truncation_dim, Signal, SignalKind,
};
use crate::stopping::{tau_dp, StopConfig};
use crate::tikhonov::{posterior, rate_formulas, RateFormulas, Space};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Rate,
    Stopping,
    Contraction,
    Coverage,
}

impl StudyKind {
    /// Stem used for the study's output files.
    pub fn file_stem(&self) -> &'static str {
        match self {
            StudyKind::Rate => "rate",
            StudyKind::Stopping => "stopping",
            StudyKind::Contraction => "contraction",
            StudyKind::Coverage => "coverage",
        }
    }
}

/// One Monte Carlo run at sample size `n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub n: u64,
    pub replicate: usize,
    pub dim: usize,
    pub tau_dp: f64,
    pub converged: bool,
    /// `||theta_hat - theta||^2`
    pub mse: f64,
    /// The same error measured on `L theta`.
    pub mse_tilde: f64,
    pub trace_cov: f64,
    pub radius: Option<f64>,
    pub covered: Option<bool>,
}

impl CsvRecord for RunRow {
    const HEADER: &'static [&'static str] = &[
        "n",
        "replicate",
        "dim",
        "tau_dp",
        "converged",
        "mse",
        "mse_tilde",
        "trace_cov",
        "radius",
        "covered",
    ];
}

/// Per-`n` aggregates; columns that a study does not compute are empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub n: u64,
    pub dim: usize,
    pub runs: usize,
    pub converged_fraction: f64,
    pub mean_mse: f64,
    pub mean_mse_tilde: f64,
    pub mean_trace: f64,
    pub median_tau: f64,
    /// `mean_trace / eps_n^2` with `eps_n^2 = n^{mse exponent}`.
    pub trace_ratio: Option<f64>,
    pub tau_lo: Option<f64>,
    pub fraction_above_tau_lo: Option<f64>,
    pub coverage: Option<f64>,
    pub mean_radius: Option<f64>,
}

impl CsvRecord for SummaryRow {
    const HEADER: &'static [&'static str] = &[
        "n",
        "dim",
        "runs",
        "converged_fraction",
        "mean_mse",
        "mean_mse_tilde",
        "mean_trace",
        "median_tau",
        "trace_ratio",
        "tau_lo",
        "fraction_above_tau_lo",
        "coverage",
        "mean_radius",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub kind: StudyKind,
    #[serde(skip)]
    pub rows: Vec<RunRow>,
    pub summary: Vec<SummaryRow>,
    /// Rate and contraction studies: log-log fit of the headline quantity.
    pub fitted_slope: Option<LineFit>,
    /// Rate study: the same fit for the error on `theta`.
    pub theta_slope: Option<LineFit>,
    pub theory_slope: Option<f64>,
    pub rates: Option<RateFormulas>,
    pub c0: Option<f64>,
}

fn run_seed(seed: u64, n: u64, replicate: usize) -> u64 {
    rng::derive_seed(seed, &[n, replicate as u64])
}

fn study_signal(
    cfg: &StudyConfig,
    model: &crate::spectral_model::DiagonalModel,
    seed: u64,
    coverage: bool,
) -> Result<Signal> {
    let dim = model.dim();
    if coverage {
        let b = cfg.beta + cfg.coverage.beta_shift;
        let coeffs = (1..=dim)
            .map(|i| cfg.signal_scale * (i as f64).powf(-1.0 - 2.0 * b))
            .collect();
        return Ok(Signal::new(coeffs, b));
    }
    let mut s = test_signal(cfg.signal_kind, dim, cfg.beta, cfg.signal_scale)?;
    if cfg.signal_kind == SignalKind::Power {
        s = s.with_random_signs(&mut rng::stream(seed, &[purpose::SIGNAL]));
    }
    match cfg.signal_space {
        Space::Theta => Ok(s),
        Space::ThetaTilde => s.tilde_to_theta(model),
    }
}

fn simulate_one(cfg: &StudyConfig, n: u64, replicate: usize, coverage: bool) -> Result<RunRow> {
    let seed = run_seed(cfg.seed, n, replicate);
    let dim = truncation_dim(n, cfg.p)?;
    let model = make_model(cfg.p, cfg.alpha, dim)?;
    let signal = study_signal(cfg, &model, seed, coverage)?;
    let obs = generate_observation(&model, &signal, n, cfg.nu, seed)?;
    let stop = tau_dp(&model, &obs, &StopConfig::from_dims(cfg.c, dim, n, None)?)?;
    let tau = stop.stopped_at.as_f64();
    let post = posterior(&model, &obs, tau)?;
    let (mut mse, mut mse_tilde) = (0.0, 0.0);
    for k in 0..dim {
        let e2 = (post.mean[k] - signal.coeffs[k]).powi(2);
        mse += e2;
        mse_tilde += e2 / model.lambda[k];
    }
    let (radius, covered) = if coverage {
        let sd: Vec<f64> = post.var.iter().map(|v| v.sqrt()).collect();
        let mut stream = rng::stream(seed, &[purpose::CREDIBLE]);
        let mut norms: Vec<f64> = (0..cfg.coverage.draws)
            .map(|_| {
                rng::standard_normals(&mut stream, dim)
                    .iter()
                    .zip(&sd)
                    .map(|(z, s)| (z * s).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        norms.sort_by(f64::total_cmp);
        let r = quantile_sorted(&norms, cfg.coverage.level);
        (Some(r), Some(mse.sqrt() <= r))
    } else {
        (None, None)
    };
    Ok(RunRow {
        n,
        replicate,
        dim,
        tau_dp: tau,
        converged: stop.converged,
        mse,
        mse_tilde,
        trace_cov: post.trace_cov,
        radius,
        covered,
    })
}

/// All `(n, replicate)` runs in key order. `coverage` switches to the
/// smoother coverage signals and adds credible radii.
pub fn simulate_runs(cfg: &StudyConfig, coverage: bool) -> Result<Vec<RunRow>> {
    cfg.validate()
        .map_err(|e| invalid("config", e.to_string()))?;
    rate_formulas(cfg.p, cfg.alpha, cfg.beta)?;
    let cells: Vec<(u64, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.replicates).map(move |r| (n, r)))
        .collect();
    cells
        .par_iter()
        .map(|&(n, r)| simulate_one(cfg, n, r, coverage))
        .collect()
}

fn group(rows: &[RunRow], n: u64) -> Vec<&RunRow> {
    rows.iter().filter(|r| r.n == n).collect()
}

fn base_summary(cfg: &StudyConfig, rows: &[RunRow]) -> Vec<SummaryRow> {
    cfg.n_grid
        .iter()
        .filter_map(|&n| {
            let g = group(rows, n);
            if g.is_empty() {
                return None;
            }
            let col = |f: fn(&RunRow) -> f64| g.iter().map(|r| f(r)).collect::<Vec<f64>>();
            Some(SummaryRow {
                n,
                dim: g[0].dim,
                runs: g.len(),
                converged_fraction: mean(&col(|r| r.converged as u8 as f64)),
                mean_mse: mean(&col(|r| r.mse)),
                mean_mse_tilde: mean(&col(|r| r.mse_tilde)),
                mean_trace: mean(&col(|r| r.trace_cov)),
                median_tau: quantile(&col(|r| r.tau_dp), 0.5),
                trace_ratio: None,
                tau_lo: None,
                fraction_above_tau_lo: None,
                coverage: None,
                mean_radius: None,
            })
        })
        .collect()
}

fn loglog_fit(
    cfg: &StudyConfig,
    summary: &[SummaryRow],
    f: fn(&SummaryRow) -> f64,
) -> Option<LineFit> {
    let skip = usize::from(cfg.drop_smallest_n);
    let pts: Vec<(f64, f64)> = summary
        .iter()
        .skip(skip)
        .map(|s| ((s.n as f64).ln(), f(s).ln()))
        .collect();
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    ols(&x, &y)
}

fn report(
    kind: StudyKind,
    rows: Vec<RunRow>,
    summary: Vec<SummaryRow>,
    rates: RateFormulas,
) -> StudyReport {
    StudyReport {
        kind,
        rows,
        summary,
        fitted_slope: None,
        theta_slope: None,
        theory_slope: None,
        rates: Some(rates),
        c0: None,
    }
}

/// Log-log fit of the mean error on `L theta` (headline) and on `theta`.
pub fn rate_report(cfg: &StudyConfig, rows: Vec<RunRow>) -> Result<StudyReport> {
    let rates = rate_formulas(cfg.p, cfg.alpha, cfg.beta)?;
    let summary = base_summary(cfg, &rows);
    let mut rep = report(StudyKind::Rate, rows, summary, rates);
    rep.fitted_slope = loglog_fit(cfg, &rep.summary, |s| s.mean_mse_tilde);
    rep.theta_slope = loglog_fit(cfg, &rep.summary, |s| s.mean_mse);
    rep.theory_slope = Some(rates.mse_rate_exponent);
    Ok(rep)
}

pub fn rate_study(cfg: &StudyConfig) -> Result<StudyReport> {
    rate_report(cfg, simulate_runs(cfg, false)?)
}

/// Fraction of runs with `tau_dp >= c0 n^e`, `c0` being the configured
/// quantile of `tau_dp / n^e` at the smallest `n`.
pub fn stopping_report(cfg: &StudyConfig, rows: Vec<RunRow>) -> Result<StudyReport> {
    let rates = rate_formulas(cfg.p, cfg.alpha, cfg.beta)?;
    let e = rates.tau_lo_exponent;
    let n0 = cfg.n_grid[0];
    let scaled: Vec<f64> = group(&rows, n0)
        .iter()
        .map(|r| r.tau_dp / (n0 as f64).powf(e))
        .collect();
    let c0 = quantile(&scaled, cfg.c0_quantile);
    let mut summary = base_summary(cfg, &rows);
    for s in &mut summary {
        let lo = c0 * (s.n as f64).powf(e);
        let g = group(&rows, s.n);
        s.tau_lo = Some(lo);
        s.fraction_above_tau_lo = Some(mean(
            &g.iter()
                .map(|r| (r.tau_dp >= lo) as u8 as f64)
                .collect::<Vec<_>>(),
        ));
    }
    let mut rep = report(StudyKind::Stopping, rows, summary, rates);
    rep.c0 = Some(c0);
    rep.theory_slope = Some(e);
    Ok(rep)
}

pub fn stopping_time_study(cfg: &StudyConfig) -> Result<StudyReport> {
    stopping_report(cfg, simulate_runs(cfg, false)?)
}

/// Posterior trace at the stopped scale and its ratio to `eps_n^2`.
pub fn contraction_report(cfg: &StudyConfig, rows: Vec<RunRow>) -> Result<StudyReport> {
    let rates = rate_formulas(cfg.p, cfg.alpha, cfg.beta)?;
    let mut summary = base_summary(cfg, &rows);
    for s in &mut summary {
        s.trace_ratio = Some(s.mean_trace / (s.n as f64).powf(rates.mse_rate_exponent));
    }
    let mut rep = report(StudyKind::Contraction, rows, summary, rates);
    rep.fitted_slope = loglog_fit(cfg, &rep.summary, |s| s.mean_trace);
    rep.theory_slope = Some(rates.mse_rate_exponent);
    Ok(rep)
}

pub fn contraction_study(cfg: &StudyConfig) -> Result<StudyReport> {
    contraction_report(cfg, simulate_runs(cfg, false)?)
}

pub fn coverage_report(cfg: &StudyConfig, rows: Vec<RunRow>) -> Result<StudyReport> {
    let rates = rate_formulas(cfg.p, cfg.alpha, cfg.beta)?;
    let mut summary = base_summary(cfg, &rows);
    for s in &mut summary {
        let g = group(&rows, s.n);
        let covered: Vec<f64> = g
            .iter()
            .map(|r| r.covered.unwrap_or(false) as u8 as f64)
            .collect();
        let radii: Vec<f64> = g.iter().filter_map(|r| r.radius).collect();
        s.coverage = Some(mean(&covered));
        s.mean_radius = (!radii.is_empty()).then(|| mean(&radii));
    }
    Ok(report(StudyKind::Coverage, rows, summary, rates))
}

pub fn coverage_study(cfg: &StudyConfig) -> Result<StudyReport> {
    coverage_report(cfg, simulate_runs(cfg, true)?)
}
