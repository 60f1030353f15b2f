use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use super::{mean, quantile_sorted, CsvRecord};
use crate::enkf::{
    closed_form, init_exact, init_random, run_until_dp, CovSpec, Ensemble, LinearForward,
};
use crate::error::{invalid, Result};
use crate::rng;
use crate::schrodinger::{run_schrodinger_inversion, InversionConfig, SchrodingerProblem};
use crate::spectral_model::{
    generate_observation, make_model, test_signal, truncation_dim, SignalKind,
};
use crate::stopping::{make_kappa, StopReport};

/// Per-coordinate 2.5%, 50% mean and 97.5% ensemble band.
struct Band {
    mean: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

fn band(ensemble: &Ensemble) -> Band {
    let m = ensemble.members();
    let mut lo = Vec::with_capacity(m.nrows());
    let mut hi = Vec::with_capacity(m.nrows());
    for row in m.row_iter() {
        let mut v: Vec<f64> = row.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        lo.push(quantile_sorted(&v, 0.025));
        hi.push(quantile_sorted(&v, 0.975));
    }
    Band {
        mean: ensemble.mean().iter().copied().collect(),
        lo,
        hi,
    }
}

fn noise_to_n(noise: f64) -> Result<u64> {
    if !(noise > 0.0 && noise.is_finite()) {
        return Err(invalid(
            "noise_levels",
            format!("noise must be positive, got {noise}"),
        ));
    }
    Ok((noise.powi(-2).round() as u64).max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientRow {
    pub signal: SignalKind,
    pub noise: f64,
    /// 1-based coefficient index.
    pub index: usize,
    pub truth: f64,
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
}

impl CsvRecord for CoefficientRow {
    const HEADER: &'static [&'static str] =
        &["signal", "noise", "index", "truth", "mean", "q025", "q975"];
}

/// One residual `||G(mean_k) - y||^2` of an EnKF trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualRow {
    pub case: String,
    pub noise: f64,
    pub replicate: usize,
    pub k: usize,
    pub residual: f64,
    pub kappa: f64,
}

impl CsvRecord for ResidualRow {
    const HEADER: &'static [&'static str] =
        &["case", "noise", "replicate", "k", "residual", "kappa"];
}

fn residual_rows(
    case: &str,
    noise: f64,
    replicate: usize,
    report: &StopReport,
) -> Vec<ResidualRow> {
    report
        .residuals
        .iter()
        .enumerate()
        .map(|(k, r)| ResidualRow {
            case: case.to_owned(),
            noise,
            replicate,
            k,
            residual: *r,
            kappa: report.threshold,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearDemoConfig {
    pub p: f64,
    pub alpha: f64,
    pub dim: usize,
    pub ensemble_size: usize,
    pub c: f64,
    pub noise_levels: Vec<f64>,
    pub signals: Vec<SignalKind>,
    /// Step size is `dt_scale * n`.
    pub dt_scale: f64,
    pub k_max: usize,
    pub seed: u64,
}

impl Default for LinearDemoConfig {
    fn default() -> Self {
        LinearDemoConfig {
            p: 0.5,
            alpha: 1.0,
            dim: 100,
            ensemble_size: 100,
            c: 1.0,
            noise_levels: vec![1e-1, 1e-2, 1e-3],
            signals: vec![SignalKind::Rough, SignalKind::Smooth],
            dt_scale: 0.02,
            k_max: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearCellSummary {
    pub signal: SignalKind,
    pub noise: f64,
    pub n: u64,
    pub kappa: f64,
    pub dt: f64,
    pub steps: usize,
    pub t_stop: f64,
    pub tau_dp: f64,
    pub converged: bool,
    pub mse: f64,
    pub mean_band_width: f64,
    /// Fraction of coefficients whose ensemble mean lies inside the band.
    pub mean_inside_band: f64,
}

impl CsvRecord for LinearCellSummary {
    const HEADER: &'static [&'static str] = &[
        "signal",
        "noise",
        "n",
        "kappa",
        "dt",
        "steps",
        "t_stop",
        "tau_dp",
        "converged",
        "mse",
        "mean_band_width",
        "mean_inside_band",
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearDemoReport {
    pub coefficients: Vec<CoefficientRow>,
    pub residuals: Vec<ResidualRow>,
    pub cells: Vec<LinearCellSummary>,
}

struct LinearCell {
    coefficients: Vec<CoefficientRow>,
    residuals: Vec<ResidualRow>,
    summary: LinearCellSummary,
}

fn linear_cell(cfg: &LinearDemoConfig, si: usize, ni: usize) -> Result<LinearCell> {
    let (kind, noise) = (cfg.signals[si], cfg.noise_levels[ni]);
    let seed = rng::derive_seed(cfg.seed, &[si as u64, ni as u64]);
    let n = noise_to_n(noise)?;
    let model = make_model(cfg.p, cfg.alpha, cfg.dim)?;
    let signal = test_signal(kind, cfg.dim, 1.0, 1.0)?;
    let obs = generate_observation(&model, &signal, n, noise * (n as f64).sqrt(), seed)?;
    let ensemble = init_random(
        &CovSpec::Spectrum(model.lambda.clone()),
        cfg.ensemble_size,
        seed,
    )?;
    let forward = LinearForward::Diagonal(DVector::from_vec(model.sigma.clone()));
    let kappa = make_kappa(cfg.dim, n, cfg.c)?;
    let dt = cfg.dt_scale * n as f64;
    let y = DVector::from_vec(obs.y);
    let out = run_until_dp(ensemble, &forward, &y, kappa, dt, cfg.k_max)?;
    let b = band(&out.ensemble);
    let coefficients: Vec<CoefficientRow> = (0..cfg.dim)
        .map(|k| CoefficientRow {
            signal: kind,
            noise,
            index: k + 1,
            truth: signal.coeffs[k],
            mean: b.mean[k],
            q025: b.lo[k],
            q975: b.hi[k],
        })
        .collect();
    let widths: Vec<f64> = b.hi.iter().zip(&b.lo).map(|(h, l)| h - l).collect();
    let inside: Vec<f64> = (0..cfg.dim)
        .map(|k| (b.lo[k] <= b.mean[k] && b.mean[k] <= b.hi[k]) as u8 as f64)
        .collect();
    let summary = LinearCellSummary {
        signal: kind,
        noise,
        n,
        kappa,
        dt,
        steps: out.report.stopped_at.as_f64() as usize,
        t_stop: out.t_stop,
        tau_dp: out.tau_dp,
        converged: out.report.converged,
        mse: b
            .mean
            .iter()
            .zip(&signal.coeffs)
            .map(|(a, t)| (a - t).powi(2))
            .sum(),
        mean_band_width: mean(&widths),
        mean_inside_band: mean(&inside),
    };
    Ok(LinearCell {
        coefficients,
        residuals: residual_rows(&kind.to_string(), noise, 0, &out.report),
        summary,
    })
}

/// EnKF on the diagonal model for every `(signal, noise)` cell. Cells that
/// hit `k_max` are flagged in their summary.
pub fn linear_demo(cfg: &LinearDemoConfig) -> Result<LinearDemoReport> {
    if cfg.dim == 0 {
        return Err(invalid("enkf.dim", "must be at least 1"));
    }
    let cells: Vec<(usize, usize)> = (0..cfg.signals.len())
        .flat_map(|s| (0..cfg.noise_levels.len()).map(move |n| (s, n)))
        .collect();
    let done: Vec<LinearCell> = cells
        .par_iter()
        .map(|&(s, n)| linear_cell(cfg, s, n))
        .collect::<Result<_>>()?;
    let mut rep = LinearDemoReport {
        coefficients: Vec::new(),
        residuals: Vec::new(),
        cells: Vec::new(),
    };
    for c in done {
        rep.coefficients.extend(c.coefficients);
        rep.residuals.extend(c.residuals);
        rep.cells.push(c.summary);
    }
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearDemoConfig {
    pub dg: usize,
    pub ensemble_size: usize,
    pub c: f64,
    pub noise_levels: Vec<f64>,
    /// Step size is `dt_scale * n` with `n = noise^{-2}`.
    pub dt_scale: f64,
    pub k_max: usize,
    pub mu: f64,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for NonlinearDemoConfig {
    fn default() -> Self {
        NonlinearDemoConfig {
            dg: 100,
            ensemble_size: 50,
            c: 0.5,
            noise_levels: vec![1e-1, 1e-2, 1e-3],
            dt_scale: 0.01,
            k_max: 300,
            mu: 1.0,
            replicates: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub noise: f64,
    pub replicate: usize,
    pub index: usize,
    pub x: f64,
    pub truth: f64,
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
}

impl CsvRecord for GridRow {
    const HEADER: &'static [&'static str] = &[
        "noise",
        "replicate",
        "index",
        "x",
        "truth",
        "mean",
        "q025",
        "q975",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonlinearRunSummary {
    pub noise: f64,
    pub replicate: usize,
    pub kappa: f64,
    pub dt: f64,
    pub steps: usize,
    pub converged: bool,
    pub final_residual: f64,
    pub rmse: f64,
    pub band_width: f64,
}

impl CsvRecord for NonlinearRunSummary {
    const HEADER: &'static [&'static str] = &[
        "noise",
        "replicate",
        "kappa",
        "dt",
        "steps",
        "converged",
        "final_residual",
        "rmse",
        "band_width",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonlinearNoiseSummary {
    pub noise: f64,
    pub runs: usize,
    pub converged_fraction: f64,
    pub mean_rmse: f64,
    pub mean_band_width: f64,
}

impl CsvRecord for NonlinearNoiseSummary {
    const HEADER: &'static [&'static str] = &[
        "noise",
        "runs",
        "converged_fraction",
        "mean_rmse",
        "mean_band_width",
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearDemoReport {
    pub grid: Vec<GridRow>,
    pub residuals: Vec<ResidualRow>,
    pub runs: Vec<NonlinearRunSummary>,
    pub by_noise: Vec<NonlinearNoiseSummary>,
}

struct NonlinearRun {
    grid: Vec<GridRow>,
    residuals: Vec<ResidualRow>,
    summary: NonlinearRunSummary,
}

fn nonlinear_run(cfg: &NonlinearDemoConfig, ni: usize, r: usize) -> Result<NonlinearRun> {
    let noise = cfg.noise_levels[ni];
    noise_to_n(noise)?;
    let problem = SchrodingerProblem::standard(cfg.dg, noise, cfg.mu)?;
    let icfg = InversionConfig {
        j: cfg.ensemble_size,
        c: cfg.c,
        dt_scale: cfg.dt_scale,
        dt: None,
        k_max: cfg.k_max,
        kappa: None,
        seed: rng::derive_seed(cfg.seed, &[ni as u64, r as u64]),
    };
    let run = run_schrodinger_inversion(&problem, &icfg)?;
    let b = band(&run.outcome.ensemble);
    let grid: Vec<GridRow> = (0..problem.grid.len())
        .map(|i| GridRow {
            noise,
            replicate: r,
            index: i,
            x: problem.grid.x[i],
            truth: problem.theta_true[i],
            mean: b.mean[i],
            q025: b.lo[i],
            q975: b.hi[i],
        })
        .collect();
    let sq: Vec<f64> = b
        .mean
        .iter()
        .zip(&problem.theta_true)
        .map(|(a, t)| (a - t).powi(2))
        .collect();
    let widths: Vec<f64> = b.hi.iter().zip(&b.lo).map(|(h, l)| h - l).collect();
    let report = &run.outcome.report;
    Ok(NonlinearRun {
        residuals: residual_rows("schrodinger", noise, r, report),
        summary: NonlinearRunSummary {
            noise,
            replicate: r,
            kappa: run.kappa,
            dt: run.dt,
            steps: report.stopped_at.as_f64() as usize,
            converged: report.converged,
            final_residual: *report.residuals.last().expect("at least one residual"),
            rmse: mean(&sq).sqrt(),
            band_width: mean(&widths),
        },
        grid,
    })
}

/// Schrödinger inversions over noise levels and replicates.
pub fn nonlinear_demo(cfg: &NonlinearDemoConfig) -> Result<NonlinearDemoReport> {
    if cfg.replicates == 0 {
        return Err(invalid("schrodinger.replicates", "must be at least 1"));
    }
    let cells: Vec<(usize, usize)> = (0..cfg.noise_levels.len())
        .flat_map(|n| (0..cfg.replicates).map(move |r| (n, r)))
        .collect();
    let done: Vec<NonlinearRun> = cells
        .par_iter()
        .map(|&(n, r)| nonlinear_run(cfg, n, r))
        .collect::<Result<_>>()?;
    let mut rep = NonlinearDemoReport {
        grid: Vec::new(),
        residuals: Vec::new(),
        runs: Vec::new(),
        by_noise: Vec::new(),
    };
    for d in done {
        rep.grid.extend(d.grid);
        rep.residuals.extend(d.residuals);
        rep.runs.push(d.summary);
    }
    for (ni, &noise) in cfg.noise_levels.iter().enumerate() {
        let g: Vec<&NonlinearRunSummary> = rep.runs[ni * cfg.replicates..(ni + 1) * cfg.replicates]
            .iter()
            .collect();
        rep.by_noise.push(NonlinearNoiseSummary {
            noise,
            runs: g.len(),
            converged_fraction: mean(
                &g.iter()
                    .map(|s| s.converged as u8 as f64)
                    .collect::<Vec<_>>(),
            ),
            mean_rmse: mean(&g.iter().map(|s| s.rmse).collect::<Vec<_>>()),
            mean_band_width: mean(&g.iter().map(|s| s.band_width).collect::<Vec<_>>()),
        });
    }
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Random,
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnkfRunConfig {
    pub p: f64,
    pub alpha: f64,
    pub beta: f64,
    pub n: u64,
    /// Defaults to `D(n)`.
    pub dim: Option<usize>,
    /// Defaults to `D + 1` for exact and 100 for random initialisation.
    pub ensemble_size: Option<usize>,
    pub init: InitKind,
    pub signal_kind: SignalKind,
    pub signal_scale: f64,
    pub c: f64,
    /// Defaults to `dt_scale * n`.
    pub dt: Option<f64>,
    pub dt_scale: f64,
    pub k_max: usize,
    pub seed: u64,
}

impl Default for EnkfRunConfig {
    fn default() -> Self {
        EnkfRunConfig {
            p: 0.5,
            alpha: 1.0,
            beta: 1.0,
            n: 1024,
            dim: None,
            ensemble_size: None,
            init: InitKind::Exact,
            signal_kind: SignalKind::Rough,
            signal_scale: 1.0,
            c: 1.0,
            dt: None,
            dt_scale: 0.01,
            k_max: 5000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnkfRunReport {
    #[serde(skip)]
    pub coefficients: Vec<CoefficientRow>,
    #[serde(skip)]
    pub residuals: Vec<ResidualRow>,
    pub dim: usize,
    pub ensemble_size: usize,
    pub kappa: f64,
    pub dt: f64,
    pub steps: usize,
    pub t_stop: f64,
    pub tau_dp: f64,
    pub converged: bool,
    /// `||ensemble mean - closed-form mean||` at the stopping time.
    pub closed_form_gap: Option<f64>,
}

/// A single EnKF run on the diagonal model.
pub fn enkf_run(cfg: &EnkfRunConfig) -> Result<EnkfRunReport> {
    let dim = match cfg.dim {
        Some(d) => d,
        None => truncation_dim(cfg.n, cfg.p)?,
    };
    let model = make_model(cfg.p, cfg.alpha, dim)?;
    let j = cfg.ensemble_size.unwrap_or(match cfg.init {
        InitKind::Exact => dim + 1,
        InitKind::Random => 100,
    });
    let signal = test_signal(cfg.signal_kind, dim, cfg.beta, cfg.signal_scale)?;
    let obs = generate_observation(&model, &signal, cfg.n, 1.0, cfg.seed)?;
    let cov = CovSpec::Spectrum(model.lambda.clone());
    let ensemble = match cfg.init {
        InitKind::Exact => init_exact(&model.lambda, None, j)?,
        InitKind::Random => init_random(&cov, j, cfg.seed)?,
    };
    let forward = LinearForward::Diagonal(DVector::from_vec(model.sigma.clone()));
    let kappa = make_kappa(dim, cfg.n, cfg.c)?;
    let dt = cfg.dt.unwrap_or(cfg.dt_scale * cfg.n as f64);
    let y = DVector::from_vec(obs.y);
    let out = run_until_dp(ensemble, &forward, &y, kappa, dt, cfg.k_max)?;
    let closed_form_gap = if out.t_stop > 0.0 {
        let cf = closed_form(&cov, &forward, &y, out.t_stop)?;
        Some((out.ensemble.mean() - cf.mean_t).norm())
    } else {
        None
    };
    let b = band(&out.ensemble);
    let noise = 1.0 / (cfg.n as f64).sqrt();
    Ok(EnkfRunReport {
        coefficients: (0..dim)
            .map(|k| CoefficientRow {
                signal: cfg.signal_kind,
                noise,
                index: k + 1,
                truth: signal.coeffs[k],
                mean: b.mean[k],
                q025: b.lo[k],
                q975: b.hi[k],
            })
            .collect(),
        residuals: residual_rows(&cfg.signal_kind.to_string(), noise, 0, &out.report),
        dim,
        ensemble_size: j,
        kappa,
        dt,
        steps: out.report.stopped_at.as_f64() as usize,
        t_stop: out.t_stop,
        tau_dp: out.tau_dp,
        converged: out.report.converged,
        closed_form_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::tests::serde_header;

    fn small_linear() -> LinearDemoConfig {
        LinearDemoConfig {
            dim: 20,
            ensemble_size: 30,
            noise_levels: vec![1e-1, 1e-2],
            dt_scale: 0.2,
            k_max: 2000,
            seed: 2,
            ..LinearDemoConfig::default()
        }
    }

    #[test]
    fn linear_demo_structure_and_bands() {
        let rep = linear_demo(&small_linear()).unwrap();
        assert_eq!(rep.cells.len(), 4);
        assert_eq!(rep.coefficients.len(), 4 * 20);
        assert_eq!(serde_header(&rep.coefficients[0]), CoefficientRow::HEADER);
        assert_eq!(serde_header(&rep.residuals[0]), ResidualRow::HEADER);
        assert_eq!(serde_header(&rep.cells[0]), LinearCellSummary::HEADER);
        for kind in [SignalKind::Rough, SignalKind::Smooth] {
            let w: Vec<f64> = rep
                .cells
                .iter()
                .filter(|c| c.signal == kind)
                .map(|c| c.mean_band_width)
                .collect();
            assert!(w[1] < w[0], "{kind}: {w:?}");
        }
        let last = rep
            .cells
            .iter()
            .rfind(|c| c.signal == SignalKind::Smooth)
            .unwrap();
        assert!(last.mean_inside_band >= 0.9);
        for c in &rep.cells {
            assert!(c.converged, "{c:?}");
        }
    }

    #[test]
    fn linear_demo_is_deterministic() {
        assert_eq!(
            linear_demo(&small_linear()).unwrap(),
            linear_demo(&small_linear()).unwrap()
        );
    }

    #[test]
    fn nonlinear_demo_structure() {
        let cfg = NonlinearDemoConfig {
            dg: 24,
            ensemble_size: 10,
            replicates: 2,
            k_max: 20,
            ..NonlinearDemoConfig::default()
        };
        let rep = nonlinear_demo(&cfg).unwrap();
        assert_eq!(rep.by_noise.len(), 3);
        assert_eq!(rep.grid.len(), 3 * 2 * 25);
        assert_eq!(serde_header(&rep.grid[0]), GridRow::HEADER);
        assert_eq!(serde_header(&rep.runs[0]), NonlinearRunSummary::HEADER);
        assert_eq!(
            serde_header(&rep.by_noise[0]),
            NonlinearNoiseSummary::HEADER
        );
        assert_eq!(rep, nonlinear_demo(&cfg).unwrap());
        let zero = NonlinearDemoConfig {
            noise_levels: vec![0.0],
            ..cfg
        };
        assert!(nonlinear_demo(&zero).is_err());
    }

    #[test]
    fn enkf_run_tracks_closed_form() {
        let rep = enkf_run(&EnkfRunConfig {
            n: 256,
            signal_kind: SignalKind::Smooth,
            ..EnkfRunConfig::default()
        })
        .unwrap();
        assert!(rep.converged);
        assert_eq!(rep.ensemble_size, rep.dim + 1);
        assert!(rep.closed_form_gap.unwrap() < 0.02, "{rep:?}");
    }
}
