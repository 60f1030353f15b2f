//! Diagonal sequence-space inverse problems.
//!
//! All spectral formulas use 1-based indices `i = 1..=D` while storage is
//! 0-based, so entry `k` of every vector corresponds to `i = k + 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, invalid, Result};
use crate::rng;

/// Exponent margin added to `beta + 1/2` for power-law signals so that the
/// order-`beta` Sobolev norm stays bounded as `D` grows.
pub const POWER_SIGNAL_MARGIN: f64 = 0.01;

/// Operator singular values `sigma_i = i^{-p}` and prior eigenvalues
/// `lambda_i = i^{-1-2 alpha}` on a `D`-dimensional truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalModel {
    pub p: f64,
    pub alpha: f64,
    pub sigma: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl DiagonalModel {
    pub fn dim(&self) -> usize {
        self.sigma.len()
    }
}

/// Builds the polynomially ill-posed model with unit proportionality constants.
pub fn make_model(p: f64, alpha: f64, dim: usize) -> Result<DiagonalModel> {
    if !(p > 0.0 && p.is_finite()) {
        return Err(invalid("p", format!("must be positive, got {p}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid("alpha", format!("must be positive, got {alpha}")));
    }
    if dim == 0 {
        return Err(invalid("D", "must be at least 1"));
    }
    let sigma = (1..=dim).map(|i| (i as f64).powf(-p)).collect();
    let lambda = (1..=dim)
        .map(|i| (i as f64).powf(-1.0 - 2.0 * alpha))
        .collect();
    Ok(DiagonalModel {
        p,
        alpha,
        sigma,
        lambda,
    })
}

/// `D(n) = ceil(n^{1/(2p+1)})`, capped at `n`.
pub fn truncation_dim(n: u64, p: f64) -> Result<usize> {
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    if !(p > 0.0 && p.is_finite()) {
        return Err(invalid("p", format!("must be positive, got {p}")));
    }
    let raw = (n as f64).powf(1.0 / (2.0 * p + 1.0));
    // Exact powers such as 1024^{1/2} must not round up to 33.
    let rounded = raw.round();
    let d = if (raw - rounded).abs() <= 1e-9 * rounded.max(1.0) {
        rounded
    } else {
        raw.ceil()
    };
    Ok((d as u64).clamp(1, n) as usize)
}

/// `sum_i i^{2 beta} x_i^2`.
pub fn sobolev_norm_sq(signal: &[f64], beta: f64) -> f64 {
    signal
        .iter()
        .enumerate()
        .map(|(k, x)| ((k + 1) as f64).powf(2.0 * beta) * x * x)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    /// `5 sin(i/2) / i`
    Rough,
    /// `5 exp(-i)`
    Smooth,
    /// `scale * i^{-(beta + 1/2 + margin)}`
    Power,
}

impl FromStr for SignalKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rough" => Ok(SignalKind::Rough),
            "smooth" => Ok(SignalKind::Smooth),
            "power" => Ok(SignalKind::Power),
            other => Err(invalid(
                "kind",
                format!("unknown signal kind `{other}` (expected rough, smooth or power)"),
            )),
        }
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignalKind::Rough => "rough",
            SignalKind::Smooth => "smooth",
            SignalKind::Power => "power",
        })
    }
}

/// Coefficients of a ground truth in the eigenbasis of `G*G`.
///
/// `declared_beta` is nominal; whether it describes `theta` or the
/// reparameterised `L theta` is up to the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub coeffs: Vec<f64>,
    pub declared_beta: f64,
    pub radius: f64,
}

impl Signal {
    pub fn new(coeffs: Vec<f64>, declared_beta: f64) -> Self {
        let radius = sobolev_norm_sq(&coeffs, declared_beta).sqrt();
        Signal {
            coeffs,
            declared_beta,
            radius,
        }
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    /// Whether the coefficients lie in the Sobolev ball of radius `radius`.
    pub fn in_ball(&self) -> bool {
        sobolev_norm_sq(&self.coeffs, self.declared_beta).sqrt() <= self.radius * (1.0 + 1e-12)
    }

    /// Flips coefficient signs with independent fair coins. The Sobolev norm
    /// is unchanged.
    pub fn with_random_signs(mut self, rng: &mut rng::StreamRng) -> Self {
        use rand::Rng;
        for c in &mut self.coeffs {
            if rng.random::<bool>() {
                *c = -*c;
            }
        }
        self
    }

    /// Maps coefficients of `L theta` back to `theta = lambda^{1/2} (L theta)`.
    pub fn tilde_to_theta(&self, model: &DiagonalModel) -> Result<Signal> {
        ensure_len(model.dim(), self.dim(), "signal vs model")?;
        let coeffs = self
            .coeffs
            .iter()
            .zip(&model.lambda)
            .map(|(c, l)| c * l.sqrt())
            .collect();
        Ok(Signal {
            coeffs,
            declared_beta: self.declared_beta,
            radius: self.radius,
        })
    }
}

pub fn test_signal(kind: SignalKind, dim: usize, beta: f64, scale: f64) -> Result<Signal> {
    if dim == 0 {
        return Err(invalid("D", "must be at least 1"));
    }
    if !(beta >= 0.0) {
        return Err(invalid("beta", format!("must be non-negative, got {beta}")));
    }
    let coeffs = (1..=dim)
        .map(|i| {
            let i = i as f64;
            match kind {
                SignalKind::Rough => 5.0 * (0.5 * i).sin() / i,
                SignalKind::Smooth => 5.0 * (-i).exp(),
                SignalKind::Power => scale * i.powf(-(beta + 0.5 + POWER_SIGNAL_MARGIN)),
            }
        })
        .collect();
    Ok(Signal::new(coeffs, beta))
}

/// Noisy data `Y_i = sigma_i theta_i + (nu / sqrt n) eps_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: Vec<f64>,
    pub n: u64,
    pub nu: f64,
    pub seed: u64,
}

impl Observation {
    /// Noise level `delta = nu / sqrt(n)`.
    pub fn delta(&self) -> f64 {
        self.nu / (self.n as f64).sqrt()
    }

    pub fn dim(&self) -> usize {
        self.y.len()
    }
}

pub fn generate_observation(
    model: &DiagonalModel,
    signal: &Signal,
    n: u64,
    nu: f64,
    seed: u64,
) -> Result<Observation> {
    ensure_len(model.dim(), signal.dim(), "signal vs model")?;
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(invalid("nu", format!("must be positive, got {nu}")));
    }
    let delta = nu / (n as f64).sqrt();
    let noise = rng::standard_normals(&mut rng::stream(seed, &[rng::purpose::NOISE]), model.dim());
    let y = model
        .sigma
        .iter()
        .zip(&signal.coeffs)
        .zip(noise)
        .map(|((s, t), e)| s * t + delta * e)
        .collect();
    Ok(Observation { y, n, nu, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spectra_match_powers() {
        let m = make_model(0.5, 1.0, 4).unwrap();
        let expect = [1.0, 2f64.powf(-0.5), 3f64.powf(-0.5), 0.5];
        for (a, b) in m.sigma.iter().zip(expect) {
            assert_relative_eq!(*a, b, max_relative = 1e-15);
        }
        let m = make_model(0.5, 1.0, 3).unwrap();
        assert_eq!(m.lambda, vec![1.0, 0.125, 1.0 / 27.0]);
        let m = make_model(0.5, 1.0, 1).unwrap();
        assert_eq!((m.sigma.clone(), m.lambda.clone()), (vec![1.0], vec![1.0]));
    }

    #[test]
    fn model_rejects_bad_parameters() {
        assert!(make_model(0.0, 1.0, 3).is_err());
        assert!(make_model(1.0, -1.0, 3).is_err());
        assert!(make_model(1.0, 1.0, 0).is_err());
        assert!(make_model(f64::NAN, 1.0, 3).is_err());
    }

    #[test]
    fn truncation_examples() {
        assert_eq!(truncation_dim(1024, 0.5).unwrap(), 32);
        assert_eq!(truncation_dim(1, 1.0).unwrap(), 1);
        assert_eq!(truncation_dim(100, 1.0).unwrap(), 5);
        assert_eq!(truncation_dim(65536, 0.5).unwrap(), 256);
        assert_eq!(truncation_dim(1000, 1.0).unwrap(), 10);
        assert!(truncation_dim(0, 1.0).is_err());
    }

    #[test]
    fn sobolev_examples() {
        assert_eq!(sobolev_norm_sq(&[1.0, 0.0, 0.0], 2.0), 1.0);
        assert_eq!(sobolev_norm_sq(&[0.0, 1.0], 1.0), 4.0);
        let smooth = test_signal(SignalKind::Smooth, 100, 1.0, 1.0).unwrap();
        let mut brute = 0.0;
        for i in 1..=100 {
            let c = 5.0 * (-(i as f64)).exp();
            brute += (i * i) as f64 * c * c;
        }
        assert_relative_eq!(
            sobolev_norm_sq(&smooth.coeffs, 1.0),
            brute,
            max_relative = 1e-12
        );
    }

    #[test]
    fn signal_examples() {
        let r = test_signal(SignalKind::Rough, 2, 0.0, 1.0).unwrap();
        assert_relative_eq!(r.coeffs[0], 5.0 * 0.5f64.sin());
        assert_relative_eq!(r.coeffs[1], 5.0 * 1f64.sin() / 2.0);
        let s = test_signal(SignalKind::Smooth, 1, 0.0, 1.0).unwrap();
        assert_relative_eq!(s.coeffs[0], 5.0 * (-1f64).exp());
        let p = test_signal(SignalKind::Power, 3, 1.0, 1.0).unwrap();
        assert_relative_eq!(p.coeffs[0], 1.0);
        assert_relative_eq!(p.coeffs[1], 2f64.powf(-1.51), max_relative = 1e-14);
        assert_relative_eq!(p.coeffs[2], 3f64.powf(-1.51), max_relative = 1e-14);
        assert!(p.in_ball());
        assert!("wiggly".parse::<SignalKind>().is_err());
    }

    #[test]
    fn noiseless_limit_and_determinism() {
        let m = make_model(0.5, 1.0, 16).unwrap();
        let s = test_signal(SignalKind::Rough, 16, 1.0, 1.0).unwrap();
        let o = generate_observation(&m, &s, 10, 1e-300, 5).unwrap();
        for k in 0..16 {
            let exact = m.sigma[k] * s.coeffs[k];
            assert!((o.y[k] - exact).abs() <= 1e-12 * exact.abs());
        }
        let a = generate_observation(&m, &s, 100, 1.0, 9).unwrap();
        let b = generate_observation(&m, &s, 100, 1.0, 9).unwrap();
        assert_eq!(a, b);
        assert!(generate_observation(&m, &s, 100, 0.0, 9).is_err());
        let short = test_signal(SignalKind::Rough, 3, 1.0, 1.0).unwrap();
        assert!(generate_observation(&m, &short, 100, 1.0, 9).is_err());
    }

    #[test]
    fn replicate_mean_matches_forward_map() {
        let m = make_model(0.5, 1.0, 4).unwrap();
        let s = test_signal(SignalKind::Rough, 4, 1.0, 1.0).unwrap();
        let (n, nu) = (16u64, 1.0);
        let reps = 10_000;
        let mut mean = [0.0; 4];
        for seed in 0..reps {
            let o = generate_observation(&m, &s, n, nu, seed).unwrap();
            for (acc, y) in mean.iter_mut().zip(&o.y) {
                *acc += y / reps as f64;
            }
        }
        let tol = 4.0 * (nu / (n as f64).sqrt()) / 100.0;
        for k in 0..4 {
            assert!(
                (mean[k] - m.sigma[k] * s.coeffs[k]).abs() <= tol,
                "component {k}"
            );
        }
    }
}
