//! Discrepancy-principle stopping in the continuous scale `tau` and in
//! discrete iterations.

use crate::error::{ensure_len, invalid, Result};
use crate::search::{first_crossing, SearchBracket};
use crate::spectral_model::{DiagonalModel, Observation};
use crate::tikhonov::{filter_complement, reparam_eigs};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopConfig {
    pub kappa: f64,
    /// Threshold constant `C` in `kappa = C D / n`.
    pub c: f64,
    pub tau0: f64,
    pub tau_max: f64,
    pub tol: f64,
}

impl StopConfig {
    /// `kappa = C D / n`, optionally scaled by a noise-level estimate `nu_hat^2`.
    pub fn from_dims(c: f64, dim: usize, n: u64, nu_hat_sq: Option<f64>) -> Result<Self> {
        let mut kappa = make_kappa(dim, n, c)?;
        if let Some(s) = nu_hat_sq {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid("nu_hat_sq", format!("must be positive, got {s}")));
            }
            kappa *= s;
        }
        let defaults = SearchBracket::default();
        Ok(StopConfig {
            kappa,
            c,
            tau0: 0.0,
            tau_max: defaults.hi,
            tol: defaults.rel_tol,
        })
    }

    fn bracket(&self) -> SearchBracket {
        SearchBracket {
            lo: self.tau0,
            hi: self.tau_max,
            rel_tol: self.tol,
            ..SearchBracket::default()
        }
    }
}

/// Where a stopping rule fired.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopPoint {
    Scale(f64),
    Iteration(usize),
}

impl StopPoint {
    pub fn as_f64(&self) -> f64 {
        match *self {
            StopPoint::Scale(t) => t,
            StopPoint::Iteration(k) => k as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StopReport {
    pub stopped_at: StopPoint,
    /// Points at which the residual was evaluated, aligned with `residuals`.
    pub points: Vec<f64>,
    pub residuals: Vec<f64>,
    pub threshold: f64,
    pub converged: bool,
}

/// `sum_i (y_i - sigma_i estimate_i)^2`.
pub fn residual(obs: &Observation, model: &DiagonalModel, estimate: &[f64]) -> Result<f64> {
    ensure_len(model.dim(), obs.dim(), "observation vs model")?;
    ensure_len(model.dim(), estimate.len(), "estimate vs model")?;
    Ok(obs
        .y
        .iter()
        .zip(&model.sigma)
        .zip(estimate)
        .map(|((y, s), e)| (y - s * e).powi(2))
        .sum())
}

/// Closed-form residual of the posterior mean, `sum_i (1 - gamma_i(tau))^2 y_i^2`.
pub fn residual_at_scale(model: &DiagonalModel, y: &[f64], tau: f64) -> f64 {
    reparam_eigs(model)
        .iter()
        .zip(y)
        .map(|(st, y)| (filter_complement(tau, *st) * y).powi(2))
        .sum()
}

/// `C D / n`, with the noise amplitude taken as 1.
pub fn make_kappa(dim: usize, n: u64, c: f64) -> Result<f64> {
    if dim == 0 {
        return Err(invalid("D", "must be at least 1"));
    }
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    if !(c > 0.0 && c <= 1.0) {
        return Err(invalid("C", format!("must lie in (0, 1], got {c}")));
    }
    Ok(c * dim as f64 / n as f64)
}

/// Smallest `tau` in `[tau0, tau_max]` whose posterior mean has residual at most `kappa`.
pub fn tau_dp(model: &DiagonalModel, obs: &Observation, config: &StopConfig) -> Result<StopReport> {
    ensure_len(model.dim(), obs.dim(), "observation vs model")?;
    if !(config.kappa >= 0.0) {
        return Err(invalid(
            "kappa",
            format!("must be non-negative, got {}", config.kappa),
        ));
    }
    let crossing = first_crossing(
        |tau| residual_at_scale(model, &obs.y, tau),
        config.kappa,
        config.bracket(),
    )?;
    let (points, residuals) = crossing.evaluations.into_iter().unzip();
    Ok(StopReport {
        stopped_at: StopPoint::Scale(crossing.at),
        points,
        residuals,
        threshold: config.kappa,
        converged: crossing.crossed,
    })
}

/// First `k >= k0` whose residual is at most `kappa`, pulling at most
/// `k_max + 1` values from `stream` (indices `0..=k_max`).
pub fn k_dp<I>(stream: I, kappa: f64, k0: usize, k_max: usize) -> Result<StopReport>
where
    I: IntoIterator<Item = f64>,
{
    if k_max <= k0 {
        return Err(invalid(
            "k_max",
            format!("must exceed k0 = {k0}, got {k_max}"),
        ));
    }
    let mut points = Vec::new();
    let mut residuals = Vec::new();
    let mut last = k0;
    for (k, r) in stream.into_iter().enumerate().take(k_max + 1) {
        last = k;
        if k < k0 {
            continue;
        }
        points.push(k as f64);
        residuals.push(r);
        if r <= kappa {
            return Ok(StopReport {
                stopped_at: StopPoint::Iteration(k),
                points,
                residuals,
                threshold: kappa,
                converged: true,
            });
        }
    }
    Ok(StopReport {
        stopped_at: StopPoint::Iteration(last.max(k0)),
        points,
        residuals,
        threshold: kappa,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral_model::{generate_observation, make_model, test_signal, SignalKind};
    use crate::tikhonov::posterior;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn noisy(dim: usize, seed: u64) -> (DiagonalModel, Observation) {
        let m = make_model(0.5, 1.0, dim).unwrap();
        let s = test_signal(SignalKind::Rough, dim, 1.0, 1.0).unwrap();
        let o = generate_observation(&m, &s, 256, 1.0, seed).unwrap();
        (m, o)
    }

    #[test]
    fn residual_examples() {
        let m = make_model(1.0, 1.0, 2).unwrap();
        let o = Observation {
            y: vec![1.0, 1.0],
            n: 1,
            nu: 1.0,
            seed: 0,
        };
        assert_eq!(residual(&o, &m, &[0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(residual(&o, &m, &[1.0, 2.0]).unwrap(), 0.0);
        assert!(residual(&o, &m, &[1.0]).is_err());
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(make_kappa(32, 1024, 1.0).unwrap(), 0.03125);
        assert_eq!(make_kappa(32, 1024, 0.5).unwrap(), 0.015625);
        assert_eq!(make_kappa(1, 1, 1.0).unwrap(), 1.0);
        assert!(make_kappa(1, 1, 1.5).is_err());
        let c = StopConfig::from_dims(1.0, 32, 1024, Some(4.0)).unwrap();
        assert_eq!(c.kappa, 0.125);
    }

    #[test]
    fn closed_form_residual_matches_posterior_mean() {
        let (m, o) = noisy(16, 3);
        for tau in [0.0, 0.3, 2.0, 40.0] {
            let mean = posterior(&m, &o, tau).unwrap().mean;
            assert_relative_eq!(
                residual(&o, &m, &mean).unwrap(),
                residual_at_scale(&m, &o.y, tau),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn tau_dp_edge_cases() {
        let (m, o) = noisy(16, 4);
        let norm: f64 = o.y.iter().map(|y| y * y).sum();
        let mut cfg = StopConfig::from_dims(1.0, 16, 256, None).unwrap();
        cfg.kappa = norm;
        let r = tau_dp(&m, &o, &cfg).unwrap();
        assert_eq!(r.stopped_at, StopPoint::Scale(0.0));
        assert!(r.converged);
        cfg.kappa = 0.0;
        let r = tau_dp(&m, &o, &cfg).unwrap();
        assert_eq!(r.stopped_at, StopPoint::Scale(cfg.tau_max));
        assert!(!r.converged);
    }

    #[test]
    fn tau_dp_matches_grid_scan() {
        for seed in 0..5 {
            let (m, o) = noisy(16, seed);
            let cfg = StopConfig::from_dims(1.0, 16, 256, None).unwrap();
            let r = tau_dp(&m, &o, &cfg).unwrap();
            let tau = r.stopped_at.as_f64();
            let (lo, hi) = (1e-6f64, 1e12f64);
            let grid: Vec<f64> = (0..10_000)
                .map(|k| (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / 9_999.0).exp())
                .collect();
            let k = grid
                .iter()
                .position(|t| residual_at_scale(&m, &o.y, *t) <= cfg.kappa)
                .expect("grid crossing");
            assert!(k > 0);
            assert!(grid[k - 1] <= tau * (1.0 + 1e-6) && tau <= grid[k] * (1.0 + 1e-6));
            let w: Vec<_> = r.points.iter().zip(&r.residuals).collect();
            assert!(w.windows(2).all(|p| p[1].1 <= &(p[0].1 * (1.0 + 1e-12))));
            assert!(r.converged);
            assert!(residual_at_scale(&m, &o.y, tau) <= cfg.kappa);
        }
    }

    #[test]
    fn k_dp_examples() {
        let r = k_dp([5.0, 3.0, 1.0], 2.0, 0, 10).unwrap();
        assert_eq!((r.stopped_at, r.converged), (StopPoint::Iteration(2), true));
        let r = k_dp([5.0, 3.0, 1.0], 10.0, 0, 10).unwrap();
        assert_eq!(r.stopped_at, StopPoint::Iteration(0));
        let r = k_dp(std::iter::repeat(9.0), 1.0, 0, 7).unwrap();
        assert_eq!(
            (r.stopped_at, r.converged),
            (StopPoint::Iteration(7), false)
        );
        assert_eq!(r.residuals.len(), 8);
        let r = k_dp([0.0, 0.0, 0.0], 1.0, 1, 5).unwrap();
        assert_eq!(r.stopped_at, StopPoint::Iteration(1));
        assert!(k_dp([1.0], 1.0, 3, 3).is_err());
    }

    proptest! {
        #[test]
        fn residual_is_non_increasing_and_homogeneous(
            ys in proptest::collection::vec(-3.0f64..3.0, 1..24), c in 0.1f64..10.0,
            t1 in 1e-3f64..1e4, t2 in 1e-3f64..1e4,
        ) {
            let m = make_model(0.5, 1.0, ys.len()).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(residual_at_scale(&m, &ys, hi) <= residual_at_scale(&m, &ys, lo) * (1.0 + 1e-12));
            let scaled: Vec<f64> = ys.iter().map(|y| c * y).collect();
            let a = residual_at_scale(&m, &scaled, lo);
            let b = c * c * residual_at_scale(&m, &ys, lo);
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300) * 10.0);
        }

        #[test]
        fn tau_dp_is_non_increasing_in_kappa(seed in 0u64..1_000, k1 in 0.01f64..1.0, k2 in 0.01f64..1.0) {
            let (m, o) = noisy(12, seed);
            let mut cfg = StopConfig::from_dims(1.0, 12, 256, None).unwrap();
            let (small, large) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
            cfg.kappa = small;
            let a = tau_dp(&m, &o, &cfg).unwrap().stopped_at.as_f64();
            cfg.kappa = large;
            let b = tau_dp(&m, &o, &cfg).unwrap().stopped_at.as_f64();
            prop_assert!(b <= a * (1.0 + 2e-6));
        }
    }
}
