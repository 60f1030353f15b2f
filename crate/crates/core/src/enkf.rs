//! Deterministic ensemble Kalman iteration with discrepancy stopping.
//!
//! Time convention: the gain is `K = dt C (dt S + I)^{-1}` with no extra
//! sample-size factor, so after `k` steps the artificial time is `t = k dt`
//! and the matching prior scale is `tau = sqrt(t)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{ensure_len, invalid, Error, Result};
use crate::rng;
use crate::stopping::{StopPoint, StopReport};

/// `J` members of dimension `Dp`, stored as the columns of a `Dp x J` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(invalid(
                "J",
                format!("ensemble needs at least 2 members, got {}", members.ncols()),
            ));
        }
        if members.nrows() == 0 {
            return Err(invalid("Dp", "members must have positive dimension"));
        }
        Ok(Ensemble { members })
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn member(&self, i: usize) -> DVector<f64> {
        self.members.column(i).into_owned()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }

    /// Member deviations from the ensemble mean, one per column.
    pub fn deviations(&self) -> DMatrix<f64> {
        centered(&self.members)
    }

    /// Empirical covariance with `1/(J-1)` normalisation.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.deviations();
        &d * d.transpose() / (self.size() - 1) as f64
    }
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = m.column_mean();
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        col -= &mean;
    }
    out
}

/// A pure map from parameters to predicted data.
pub trait ForwardMap: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, theta: &DVector<f64>) -> Result<DVector<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearForward {
    /// Diagonal operator given by its singular values.
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl LinearForward {
    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            LinearForward::Diagonal(s) => DMatrix::from_diagonal(s),
            LinearForward::Dense(m) => m.clone(),
        }
    }
}

impl ForwardMap for LinearForward {
    fn input_dim(&self) -> usize {
        match self {
            LinearForward::Diagonal(s) => s.len(),
            LinearForward::Dense(m) => m.ncols(),
        }
    }

    fn output_dim(&self) -> usize {
        match self {
            LinearForward::Diagonal(s) => s.len(),
            LinearForward::Dense(m) => m.nrows(),
        }
    }

    fn apply(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_len(self.input_dim(), theta.len(), "forward input")?;
        Ok(match self {
            LinearForward::Diagonal(s) => s.component_mul(theta),
            LinearForward::Dense(m) => m * theta,
        })
    }
}

/// Prior covariance, either diagonal (by its spectrum) or dense.
#[derive(Debug, Clone, PartialEq)]
pub enum CovSpec {
    Spectrum(Vec<f64>),
    Matrix(DMatrix<f64>),
}

impl CovSpec {
    pub fn dim(&self) -> usize {
        match self {
            CovSpec::Spectrum(s) => s.len(),
            CovSpec::Matrix(m) => m.nrows(),
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            CovSpec::Spectrum(s) => DMatrix::from_diagonal(&DVector::from_column_slice(s)),
            CovSpec::Matrix(m) => m.clone(),
        }
    }

    /// A square root `F` with `F F^T = C`.
    fn factor(&self) -> Result<DMatrix<f64>> {
        match self {
            CovSpec::Spectrum(s) => {
                if let Some(&bad) = s.iter().find(|v| !(**v >= 0.0)) {
                    return Err(Error::NotPositiveSemiDefinite {
                        min_eigenvalue: bad,
                    });
                }
                Ok(DMatrix::from_diagonal(&DVector::from_iterator(
                    s.len(),
                    s.iter().map(|v| v.sqrt()),
                )))
            }
            CovSpec::Matrix(m) => {
                if !m.is_square() {
                    return Err(invalid("C0", "covariance must be square"));
                }
                let asym = (m - m.transpose()).amax();
                if asym > 1e-12 * m.amax().max(1.0) {
                    return Err(invalid(
                        "C0",
                        format!("covariance is not symmetric (max asymmetry {asym:e})"),
                    ));
                }
                let eig = SymmetricEigen::new(m.clone());
                let min = eig.eigenvalues.min();
                let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
                if min < -1e-12 * scale {
                    return Err(Error::NotPositiveSemiDefinite {
                        min_eigenvalue: min,
                    });
                }
                let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                Ok(eig.eigenvectors * DMatrix::from_diagonal(&roots))
            }
        }
    }
}

/// `J` independent draws from `N(0, C0)`.
pub fn init_random(cov: &CovSpec, j: usize, seed: u64) -> Result<Ensemble> {
    if j < 2 {
        return Err(invalid(
            "J",
            format!("ensemble needs at least 2 members, got {j}"),
        ));
    }
    let factor = cov.factor()?;
    let d = cov.dim();
    let mut stream = rng::stream(seed, &[rng::purpose::ENSEMBLE]);
    let z = DMatrix::from_vec(d, j, rng::standard_normals(&mut stream, d * j));
    Ensemble::new(factor * z)
}

/// Orthonormal `J x (J-1)` basis of the complement of the all-ones vector.
fn helmert(j: usize) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(j, j - 1);
    for k in 1..j {
        let norm = ((k * (k + 1)) as f64).sqrt();
        for r in 0..k {
            u[(r, k - 1)] = 1.0 / norm;
        }
        u[(k, k - 1)] = -(k as f64) / norm;
    }
    u
}

/// Ensemble whose empirical mean is zero and whose empirical covariance is
/// exactly `B diag(spectrum) B^T` (`B = I` when no basis is given).
///
/// `J = Dp + 1` uses a regular simplex; `J = 2 Dp` uses symmetric pairs.
pub fn init_exact(spectrum: &[f64], basis: Option<&DMatrix<f64>>, j: usize) -> Result<Ensemble> {
    let dp = spectrum.len();
    if dp == 0 {
        return Err(invalid("spectrum", "must be non-empty"));
    }
    if let Some(&bad) = spectrum.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::NotPositiveSemiDefinite {
            min_eigenvalue: bad,
        });
    }
    let roots = DVector::from_iterator(dp, spectrum.iter().map(|v| v.sqrt()));
    let x = if j == dp + 1 {
        let scale = ((j - 1) as f64).sqrt();
        DMatrix::from_diagonal(&roots) * helmert(j).transpose() * scale
    } else if j == 2 * dp {
        let a = ((2 * dp - 1) as f64 / 2.0).sqrt();
        let mut x = DMatrix::zeros(dp, j);
        for k in 0..dp {
            x[(k, 2 * k)] = a * roots[k];
            x[(k, 2 * k + 1)] = -a * roots[k];
        }
        x
    } else {
        return Err(Error::UnsupportedEnsembleSize {
            j,
            dim: dp,
            simplex: dp + 1,
            pairs: 2 * dp,
        });
    };
    let x = match basis {
        None => x,
        Some(b) => {
            if b.nrows() != dp || b.ncols() != dp {
                return Err(Error::DimensionMismatch {
                    expected: dp,
                    actual: b.nrows(),
                    context: "basis vs spectrum",
                });
            }
            let defect = (b.transpose() * b - DMatrix::identity(dp, dp)).amax();
            if defect > 1e-10 {
                return Err(invalid(
                    "basis",
                    format!("not orthogonal (defect {defect:e})"),
                ));
            }
            b * x
        }
    };
    Ensemble::new(x)
}

/// Keeps the leading `rank` entries of a non-increasing spectrum; returns the
/// kept part and the operator-norm error of the truncation.
pub fn truncate_spectrum(spectrum: &[f64], rank: usize) -> (Vec<f64>, f64) {
    let rank = rank.min(spectrum.len());
    let dropped = spectrum[rank..].iter().cloned().fold(0.0, f64::max);
    (spectrum[..rank].to_vec(), dropped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub image_mean: DVector<f64>,
    /// `Dp x Dy` cross covariance between members and images.
    pub cross_cov: DMatrix<f64>,
    /// `Dy x Dy` covariance of the images.
    pub obs_cov: DMatrix<f64>,
}

/// Empirical moments; `images` holds the forward image of member `i` in column `i`.
pub fn empirical_moments(ensemble: &Ensemble, images: &DMatrix<f64>) -> Result<Moments> {
    ensure_len(ensemble.size(), images.ncols(), "images vs ensemble size")?;
    let norm = (ensemble.size() - 1) as f64;
    let dev = ensemble.deviations();
    let img_dev = centered(images);
    Ok(Moments {
        mean: ensemble.mean(),
        image_mean: images.column_mean(),
        cross_cov: &dev * img_dev.transpose() / norm,
        obs_cov: &img_dev * img_dev.transpose() / norm,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainContext {
    pub cross_cov: DMatrix<f64>,
    pub obs_cov: DMatrix<f64>,
    pub dt: f64,
}

/// `K = dt C (dt S + I)^{-1}` via a Cholesky solve of the transposed system.
pub fn kalman_gain(ctx: &GainContext) -> Result<DMatrix<f64>> {
    if !(ctx.dt > 0.0 && ctx.dt.is_finite()) {
        return Err(invalid("dt", format!("must be positive, got {}", ctx.dt)));
    }
    let dy = ctx.obs_cov.nrows();
    ensure_len(
        dy,
        ctx.cross_cov.ncols(),
        "cross covariance vs observation covariance",
    )?;
    let mut a = &ctx.obs_cov * ctx.dt;
    for i in 0..dy {
        a[(i, i)] += 1.0;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::SingularSystem("dt S + I is not positive definite".into()))?;
    // (dt S + I) K^T = dt C^T, using the symmetry of dt S + I.
    let kt = chol.solve(&(ctx.cross_cov.transpose() * ctx.dt));
    Ok(kt.transpose())
}

/// Forward images of every member, evaluated in parallel.
pub fn forward_images<F: ForwardMap + ?Sized>(
    ensemble: &Ensemble,
    forward: &F,
) -> Result<DMatrix<f64>> {
    ensure_len(
        forward.input_dim(),
        ensemble.dim(),
        "forward input vs ensemble",
    )?;
    let cols: Vec<DVector<f64>> = (0..ensemble.size())
        .into_par_iter()
        .map(|i| {
            let img = forward
                .apply(&ensemble.member(i))
                .map_err(|e| Error::ForwardFailed {
                    member: i,
                    source: Box::new(e),
                })?;
            if img.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteImage { member: i });
            }
            Ok(img)
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_columns(&cols))
}

/// One step `theta_i <- theta_i - K (G theta_i + mean(G theta) - 2 y) / 2`.
pub fn enkf_step<F: ForwardMap + ?Sized>(
    ensemble: &Ensemble,
    forward: &F,
    y: &DVector<f64>,
    dt: f64,
) -> Result<Ensemble> {
    ensure_len(forward.output_dim(), y.len(), "data vs forward output")?;
    let images = forward_images(ensemble, forward)?;
    let m = empirical_moments(ensemble, &images)?;
    let k = kalman_gain(&GainContext {
        cross_cov: m.cross_cov,
        obs_cov: m.obs_cov,
        dt,
    })?;
    let mut innov = images;
    let shift = &m.image_mean - y * 2.0;
    for mut col in innov.column_iter_mut() {
        col += &shift;
    }
    Ensemble::new(&ensemble.members - k * innov * 0.5)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub ensemble: Ensemble,
    pub report: StopReport,
    /// Artificial time `k_dp dt` at the stop.
    pub t_stop: f64,
    pub tau_dp: f64,
}

fn mean_residual<F: ForwardMap + ?Sized>(
    ens: &Ensemble,
    forward: &F,
    y: &DVector<f64>,
) -> Result<f64> {
    let img = forward.apply(&ens.mean())?;
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteImage { member: usize::MAX });
    }
    Ok((img - y).norm_squared())
}

/// Steps until `||G(mean) - y||^2 <= kappa`, checking before every step.
/// Hitting `k_max` is reported through `converged = false`.
pub fn run_until_dp<F: ForwardMap + ?Sized>(
    ensemble: Ensemble,
    forward: &F,
    y: &DVector<f64>,
    kappa: f64,
    dt: f64,
    k_max: usize,
) -> Result<RunOutcome> {
    if !(kappa > 0.0) {
        return Err(invalid("kappa", format!("must be positive, got {kappa}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid("dt", format!("must be positive, got {dt}")));
    }
    ensure_len(forward.output_dim(), y.len(), "data vs forward output")?;
    let mut ens = ensemble;
    let mut points = Vec::new();
    let mut residuals = Vec::new();
    let mut k = 0;
    let converged = loop {
        let r = mean_residual(&ens, forward, y)?;
        points.push(k as f64);
        residuals.push(r);
        if r <= kappa && k_max > 0 {
            break true;
        }
        if k >= k_max {
            break false;
        }
        ens = enkf_step(&ens, forward, y, dt)?;
        k += 1;
    };
    let t_stop = k as f64 * dt;
    Ok(RunOutcome {
        ensemble: ens,
        report: StopReport {
            stopped_at: StopPoint::Iteration(k),
            points,
            residuals,
            threshold: kappa,
            converged,
        },
        t_stop,
        tau_dp: t_stop.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedForm {
    pub mean_t: DVector<f64>,
    pub cov_t: DMatrix<f64>,
    pub t: f64,
}

/// Mean and covariance of the linear-Gaussian flow at time `t`.
pub fn closed_form(
    c0: &CovSpec,
    g: &LinearForward,
    y: &DVector<f64>,
    t: f64,
) -> Result<ClosedForm> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(invalid("t", format!("must be positive, got {t}")));
    }
    ensure_len(g.input_dim(), c0.dim(), "prior vs forward input")?;
    ensure_len(g.output_dim(), y.len(), "data vs forward output")?;
    let c = c0.matrix();
    let gm = g.matrix();
    let cgt = &c * gm.transpose();
    let mut s = &gm * &cgt;
    for i in 0..s.nrows() {
        s[(i, i)] += 1.0 / t;
    }
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::SingularSystem("G C0 G^T + I/t is not positive definite".into()))?;
    let mean_t = &cgt * chol.solve(y);
    let cov_t = &c - &cgt * chol.solve(&cgt.transpose());
    Ok(ClosedForm { mean_t, cov_t, t })
}
