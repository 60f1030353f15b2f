//! Conjugate Gaussian posterior in sequence space and its spectral filter.
//!
//! Noise convention: the data carry variance `delta^2 = nu^2 / n` per
//! component and the prior scale enters as `tau^2` (not `n tau^2`), so the
//! posterior mean is free of `n` while the posterior variance carries one
//! factor of `delta^2`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, invalid, Error, Result};
use crate::search::{first_crossing, SearchBracket};
use crate::spectral_model::{DiagonalModel, Observation, Signal};

/// Singular values of the reparameterised operator `A = G L^{-1}`:
/// `sigma_i * lambda_i^{1/2}`, i.e. `i^{-(p + 1/2 + alpha)}`.
pub fn reparam_eigs(model: &DiagonalModel) -> Vec<f64> {
    model
        .sigma
        .iter()
        .zip(&model.lambda)
        .map(|(s, l)| s * l.sqrt())
        .collect()
}

/// Tikhonov filter `(1 + (tau sigma~)^{-2})^{-1}`, zero at `tau = 0`.
pub fn filter_gamma(tau: f64, sigma_tilde: f64) -> f64 {
    let x = tau * sigma_tilde;
    if x == 0.0 {
        return 0.0;
    }
    let inv = 1.0 / x;
    1.0 / (1.0 + inv * inv)
}

/// `1 - filter_gamma`, evaluated without cancellation.
pub fn filter_complement(tau: f64, sigma_tilde: f64) -> f64 {
    let x = tau * sigma_tilde;
    1.0 / (1.0 + x * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub tau: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub trace_cov: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau >= 0.0 && !tau.is_nan() {
        Ok(())
    } else {
        Err(invalid("tau", format!("must be non-negative, got {tau}")))
    }
}

/// Entry-wise posterior `N(gamma_i y_i / sigma_i, delta^2 tau^2 lambda_i / (1 + tau^2 lambda_i sigma_i^2))`.
pub fn posterior(model: &DiagonalModel, obs: &Observation, tau: f64) -> Result<PosteriorSummary> {
    check_tau(tau)?;
    ensure_len(model.dim(), obs.dim(), "observation vs model")?;
    let delta_sq = obs.delta().powi(2);
    let st = reparam_eigs(model);
    let mut mean = Vec::with_capacity(model.dim());
    let mut var = Vec::with_capacity(model.dim());
    for ((y, s), st) in obs.y.iter().zip(&model.sigma).zip(&st) {
        let g = filter_gamma(tau, *st);
        mean.push(g * y / s);
        // tau^2 lambda / (1 + tau^2 lambda sigma^2) == gamma / sigma^2
        var.push(delta_sq * g / (s * s));
    }
    let trace_cov = var.iter().sum();
    Ok(PosteriorSummary {
        tau,
        mean,
        var,
        trace_cov,
    })
}

/// `sum_i tau^2 lambda_i / (1 + tau^2 lambda_i sigma_i^2) / n`.
pub fn trace_posterior_cov(model: &DiagonalModel, tau: f64, n: u64) -> Result<f64> {
    check_tau(tau)?;
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    let st = reparam_eigs(model);
    Ok(model
        .sigma
        .iter()
        .zip(&st)
        .map(|(s, st)| filter_gamma(tau, *st) / (s * s))
        .sum::<f64>()
        / n as f64)
}

/// Coordinates in which bias and variance are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    /// The original coefficients `theta`.
    Theta,
    /// The reparameterised coefficients `L theta = lambda^{-1/2} theta`.
    ThetaTilde,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasVariance {
    pub bias_sq: f64,
    pub variance: f64,
    pub weak_bias_sq: f64,
    pub weak_variance: f64,
}

impl BiasVariance {
    pub fn mse(&self) -> f64 {
        self.bias_sq + self.variance
    }
}

/// Strong and weak bias/variance of the scale-`tau` estimator.
///
/// In `Theta` the per-component operator gain is `sigma_i`, in `ThetaTilde`
/// it is `sigma~_i`; the weak (prediction) quantities coincide in both.
pub fn bias_variance(
    model: &DiagonalModel,
    signal: &Signal,
    tau: f64,
    delta: f64,
    space: Space,
) -> Result<BiasVariance> {
    check_tau(tau)?;
    if !(delta >= 0.0) {
        return Err(invalid(
            "delta",
            format!("must be non-negative, got {delta}"),
        ));
    }
    ensure_len(model.dim(), signal.dim(), "signal vs model")?;
    let st = reparam_eigs(model);
    let d2 = delta * delta;
    let mut out = BiasVariance {
        bias_sq: 0.0,
        variance: 0.0,
        weak_bias_sq: 0.0,
        weak_variance: 0.0,
    };
    for k in 0..model.dim() {
        let g = filter_gamma(tau, st[k]);
        let r = filter_complement(tau, st[k]);
        let (c, gain) = match space {
            Space::Theta => (signal.coeffs[k], model.sigma[k]),
            Space::ThetaTilde => (signal.coeffs[k] / model.lambda[k].sqrt(), st[k]),
        };
        out.bias_sq += r * r * c * c;
        out.variance += d2 * g * g / (gain * gain);
        out.weak_bias_sq += r * r * gain * gain * c * c;
        out.weak_variance += d2 * g * g;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleTimes {
    /// First scale where the weak bias falls to the weak variance.
    pub tau_weak: f64,
    pub weak_crossed: bool,
    /// First scale where the strong bias falls to the strong variance.
    pub tau_strong: f64,
    pub strong_crossed: bool,
}

/// Bias/variance balancing scales. When no crossing exists in the bracket
/// the time is `bracket.hi` and the matching flag is `false`.
pub fn oracle_times(
    model: &DiagonalModel,
    signal: &Signal,
    delta: f64,
    space: Space,
    bracket: SearchBracket,
) -> Result<OracleTimes> {
    bracket.validate()?;
    let mut last_err = None;
    let mut gap = |tau: f64, weak: bool| match bias_variance(model, signal, tau, delta, space) {
        Ok(bv) if weak => bv.weak_bias_sq - bv.weak_variance,
        Ok(bv) => bv.bias_sq - bv.variance,
        Err(e) => {
            last_err = Some(e);
            f64::NAN
        }
    };
    let weak = first_crossing(|t| gap(t, true), 0.0, bracket)?;
    let strong = first_crossing(|t| gap(t, false), 0.0, bracket)?;
    if let Some(e) = last_err {
        return Err(e);
    }
    Ok(OracleTimes {
        tau_weak: weak.at,
        weak_crossed: weak.crossed,
        tau_strong: strong.at,
        strong_crossed: strong.crossed,
    })
}

/// Exponents of `n` in the theoretical rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFormulas {
    /// Optimal prior scale `tau* ~ n^e`.
    pub optimal_tau_exponent: f64,
    /// Squared error `eps_n^2 ~ n^e`.
    pub mse_rate_exponent: f64,
    /// Lower bound on the stopped scale, `tau_lo ~ n^e`.
    pub tau_lo_exponent: f64,
}

pub fn rate_formulas(p: f64, alpha: f64, beta: f64) -> Result<RateFormulas> {
    if !(p > 0.0) {
        return Err(invalid("p", format!("must be positive, got {p}")));
    }
    if !(alpha > 0.0) {
        return Err(invalid("alpha", format!("must be positive, got {alpha}")));
    }
    if !(beta >= 0.0) {
        return Err(invalid("beta", format!("must be non-negative, got {beta}")));
    }
    let bound = 2.0 * alpha + 2.0 * p + 1.0;
    if beta >= bound {
        return Err(Error::OutOfRegime { beta, bound });
    }
    let a = 2.0 * p + 1.0 + 2.0 * alpha;
    let s = 2.0 * beta + 2.0 * p + 2.0 + 2.0 * alpha;
    Ok(RateFormulas {
        optimal_tau_exponent: a / (2.0 * s),
        mse_rate_exponent: -4.0 * beta / s,
        tau_lo_exponent: a / s,
    })
}
