//! Periodic 1-D Schrödinger problem `u''/2 - e^theta u = g` on `[0, 2 pi)`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::enkf::{run_until_dp, Ensemble, ForwardMap, RunOutcome};
use crate::error::{ensure_len, invalid, Error, Result};
use crate::rng::{self, StreamRng};

/// `Dg + 1` equispaced periodic nodes `x_i = 2 pi i / (Dg + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D {
    pub dg: usize,
    pub x: Vec<f64>,
    pub h: f64,
}

impl Grid1D {
    /// Number of cyclic unknowns, `Dg + 1`.
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

pub fn build_grid(dg: usize) -> Result<Grid1D> {
    if dg < 3 {
        return Err(invalid("Dg", format!("must be at least 3, got {dg}")));
    }
    let n = dg + 1;
    let h = 2.0 * PI / n as f64;
    Ok(Grid1D {
        dg,
        x: (0..n).map(|i| i as f64 * h).collect(),
        h,
    })
}

/// Gaussian bump centred at `pi`, shifted to zero mean.
pub fn source_term(grid: &Grid1D) -> Vec<f64> {
    let raw: Vec<f64> = grid
        .x
        .iter()
        .map(|x| (-(x - PI).powi(2) / 10.0).exp())
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|v| v - mean).collect()
}

/// Solves the cyclic tridiagonal system with constant off-diagonal `off`
/// and diagonal `diag` by Thomas elimination plus a Sherman-Morrison
/// correction for the two corner entries.
fn solve_cyclic(diag: &[f64], off: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let gamma = -diag[0];
    let mut b = diag.to_vec();
    b[0] -= gamma;
    b[n - 1] -= off * off / gamma;
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = off;

    // Shared forward sweep for both right-hand sides.
    let mut cp = vec![0.0; n];
    let mut x = rhs.to_vec();
    let mut z = u;
    let mut piv = b[0];
    for i in 0..n {
        if i > 0 {
            piv = b[i] - off * cp[i - 1];
            x[i] -= off * x[i - 1];
            z[i] -= off * z[i - 1];
        }
        if !(piv.abs() > 1e-300) || !piv.is_finite() {
            return Err(Error::SingularSystem(format!("zero pivot at row {i}")));
        }
        cp[i] = off / piv;
        x[i] /= piv;
        z[i] /= piv;
    }
    for i in (0..n - 1).rev() {
        x[i] -= cp[i] * x[i + 1];
        z[i] -= cp[i] * z[i + 1];
    }
    let vx = x[0] + off / gamma * x[n - 1];
    let vz = z[0] + off / gamma * z[n - 1];
    let denom = 1.0 + vz;
    if !(denom.abs() > 1e-300) {
        return Err(Error::SingularSystem(
            "corner correction is singular".into(),
        ));
    }
    let f = vx / denom;
    Ok(x.iter().zip(&z).map(|(a, b)| a - f * b).collect())
}

/// Solution of `(u_{i+1} - 2 u_i + u_{i-1}) / (2 h^2) - e^{theta_i} u_i = g_i`
/// with periodic wrap-around.
pub fn solve_forward(theta: &[f64], grid: &Grid1D, g: &[f64]) -> Result<Vec<f64>> {
    ensure_len(grid.len(), theta.len(), "theta vs grid")?;
    ensure_len(grid.len(), g.len(), "source vs grid")?;
    let off = 0.5 / (grid.h * grid.h);
    let mut diag = Vec::with_capacity(theta.len());
    for (i, t) in theta.iter().enumerate() {
        let f = t.exp();
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::SingularSystem(format!(
                "potential exp(theta) = {f:e} at node {i} is not positive and finite"
            )));
        }
        diag.push(-2.0 * off - f);
    }
    solve_cyclic(&diag, off, g)
}

/// Periodic second difference divided by `h^2`.
fn periodic_laplacian(grid: &Grid1D) -> DMatrix<f64> {
    let n = grid.len();
    let s = 1.0 / (grid.h * grid.h);
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = -2.0 * s;
        m[(i, (i + 1) % n)] += s;
        m[(i, (i + n - 1) % n)] += s;
    }
    m
}

/// Prior precision `4 h (mu/(Dg+1) 1 1^T - Delta_h)^2`.
pub fn prior_precision(grid: &Grid1D, mu: f64) -> Result<DMatrix<f64>> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(invalid("mu", format!("must be positive, got {mu}")));
    }
    let n = grid.len();
    let base = DMatrix::from_element(n, n, mu / n as f64) - periodic_laplacian(grid);
    let p = &base * &base * (4.0 * grid.h);
    // Symmetrise away the roundoff of the product.
    Ok((&p + p.transpose()) * 0.5)
}

/// Draws from `N(0, P^{-1})` through the Cholesky factor of the precision `P`.
#[derive(Debug, Clone)]
pub struct PriorSampler {
    chol: Cholesky<f64, Dyn>,
}

impl PriorSampler {
    pub fn new(grid: &Grid1D, mu: f64) -> Result<Self> {
        let p = prior_precision(grid, mu)?;
        let chol = p.cholesky().ok_or(Error::PriorNotPositiveDefinite { mu })?;
        Ok(PriorSampler { chol })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// `x = L^{-T} z` has covariance `(L L^T)^{-1}`.
    pub fn sample(&self, rng: &mut StreamRng) -> DVector<f64> {
        let z = DVector::from_vec(rng::standard_normals(rng, self.dim()));
        self.chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn sample_ensemble(&self, j: usize, seed: u64) -> Result<Ensemble> {
        if j < 2 {
            return Err(invalid(
                "J",
                format!("ensemble needs at least 2 members, got {j}"),
            ));
        }
        let mut stream = rng::stream(seed, &[rng::purpose::ENSEMBLE]);
        let cols: Vec<DVector<f64>> = (0..j).map(|_| self.sample(&mut stream)).collect();
        Ensemble::new(DMatrix::from_columns(&cols))
    }
}

/// The map `theta -> u` for a fixed source.
#[derive(Debug, Clone)]
pub struct SchrodingerForward {
    pub grid: Grid1D,
    pub g: Vec<f64>,
}

impl ForwardMap for SchrodingerForward {
    fn input_dim(&self) -> usize {
        self.grid.len()
    }

    fn output_dim(&self) -> usize {
        self.grid.len()
    }

    fn apply(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        solve_forward(theta.as_slice(), &self.grid, &self.g).map(DVector::from_vec)
    }
}

#[derive(Debug, Clone)]
pub struct SchrodingerProblem {
    pub grid: Grid1D,
    pub g: Vec<f64>,
    pub theta_true: Vec<f64>,
    /// Standard deviation of the additive observation noise.
    pub noise: f64,
    pub mu: f64,
}

impl SchrodingerProblem {
    /// Grid of size `dg`, bump source and ground truth `0.5 sin x`.
    pub fn standard(dg: usize, noise: f64, mu: f64) -> Result<Self> {
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(invalid(
                "noise",
                format!("must be non-negative, got {noise}"),
            ));
        }
        let grid = build_grid(dg)?;
        let g = source_term(&grid);
        let theta_true = grid.x.iter().map(|x| 0.5 * x.sin()).collect();
        Ok(SchrodingerProblem {
            grid,
            g,
            theta_true,
            noise,
            mu,
        })
    }

    pub fn forward(&self) -> SchrodingerForward {
        SchrodingerForward {
            grid: self.grid.clone(),
            g: self.g.clone(),
        }
    }

    /// Effective sample size `noise^{-2}`; infinite for noiseless data.
    pub fn sample_size(&self) -> f64 {
        self.noise.powi(-2)
    }

    /// `u(theta_true) + noise * eps` on the grid.
    pub fn observe(&self, seed: u64) -> Result<DVector<f64>> {
        let clean = solve_forward(&self.theta_true, &self.grid, &self.g)?;
        let eps =
            rng::standard_normals(&mut rng::stream(seed, &[rng::purpose::NOISE]), clean.len());
        Ok(DVector::from_iterator(
            clean.len(),
            clean.iter().zip(eps).map(|(u, e)| u + self.noise * e),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionConfig {
    pub j: usize,
    pub c: f64,
    /// Step size is `dt_scale * n` unless `dt` is set.
    pub dt_scale: f64,
    pub dt: Option<f64>,
    pub k_max: usize,
    /// Replaces `C Dg / n` when set.
    pub kappa: Option<f64>,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            j: 50,
            c: 0.5,
            dt_scale: 0.01,
            dt: None,
            k_max: 300,
            kappa: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InversionRun {
    pub outcome: RunOutcome,
    pub y: DVector<f64>,
    pub kappa: f64,
    pub dt: f64,
}

pub fn run_schrodinger_inversion(
    problem: &SchrodingerProblem,
    cfg: &InversionConfig,
) -> Result<InversionRun> {
    if cfg.j < 2 {
        return Err(invalid(
            "J",
            format!("ensemble needs at least 2 members, got {}", cfg.j),
        ));
    }
    let n = problem.sample_size();
    let kappa = match cfg.kappa {
        Some(k) => k,
        None if n.is_finite() => cfg.c * problem.grid.dg as f64 / n,
        None => {
            return Err(invalid(
                "kappa",
                "noiseless data need an explicit threshold",
            ))
        }
    };
    let dt = match cfg.dt {
        Some(dt) => dt,
        None if n.is_finite() => cfg.dt_scale * n,
        None => return Err(invalid("dt", "noiseless data need an explicit step size")),
    };
    let y = problem.observe(cfg.seed)?;
    let ensemble =
        PriorSampler::new(&problem.grid, problem.mu)?.sample_ensemble(cfg.j, cfg.seed)?;
    let outcome = run_until_dp(ensemble, &problem.forward(), &y, kappa, dt, cfg.k_max)?;
    Ok(InversionRun {
        outcome,
        y,
        kappa,
        dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    #[test]
    fn grid_examples() {
        let g = build_grid(3).unwrap();
        for (a, b) in g.x.iter().zip([0.0, PI / 2.0, PI, 1.5 * PI]) {
            assert_relative_eq!(*a, b, max_relative = 1e-15);
        }
        let g = build_grid(100).unwrap();
        assert_eq!(g.len(), 101);
        assert!(g.x.windows(2).all(|w| (w[1] - w[0] - g.h).abs() <= 1e-14));
        assert!(*g.x.last().unwrap() < 2.0 * PI);
        assert!(build_grid(2).is_err());
    }

    #[test]
    fn source_examples() {
        let grid = build_grid(100).unwrap();
        let g = source_term(&grid);
        assert!(g.iter().sum::<f64>().abs() / g.len() as f64 <= 1e-14);
        let imax = (0..g.len()).max_by(|a, b| g[*a].total_cmp(&g[*b])).unwrap();
        let nearest = (0..g.len())
            .min_by(|a, b| (grid.x[*a] - PI).abs().total_cmp(&(grid.x[*b] - PI).abs()))
            .unwrap();
        assert_eq!(imax, nearest);
        let bump = |x: f64| (-(x - PI).powi(2) / 10.0).exp();
        assert!((bump(PI - grid.h) - bump(PI + grid.h)).abs() <= 1e-12);
    }

    fn manufactured_error(dg: usize) -> f64 {
        let grid = build_grid(dg).unwrap();
        let g: Vec<f64> = grid.x.iter().map(|x| -1.5 * x.sin()).collect();
        let u = solve_forward(&vec![0.0; grid.len()], &grid, &g).unwrap();
        u.iter()
            .zip(&grid.x)
            .map(|(u, x)| (u - x.sin()).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn manufactured_solution_is_second_order() {
        let errs: Vec<f64> = [50, 100, 200]
            .iter()
            .map(|d| manufactured_error(*d))
            .collect();
        for w in errs.windows(2) {
            let r = w[0] / w[1];
            assert!((3.5..=4.5).contains(&r), "{errs:?}");
        }
    }

    #[test]
    fn dominant_balance_for_large_potential() {
        let grid = build_grid(64).unwrap();
        let g = source_term(&grid);
        let u = solve_forward(&vec![20.0; grid.len()], &grid, &g).unwrap();
        let f = 20f64.exp();
        for (u, g) in u.iter().zip(&g) {
            assert!((u + g / f).abs() <= 0.01 * (g / f).abs());
        }
    }

    #[test]
    fn cyclic_solver_matches_dense_solve() {
        let grid = build_grid(12).unwrap();
        let theta: Vec<f64> = grid.x.iter().map(|x| x.cos()).collect();
        let g = source_term(&grid);
        let u = solve_forward(&theta, &grid, &g).unwrap();
        let n = grid.len();
        let s = 0.5 / (grid.h * grid.h);
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = -2.0 * s - theta[i].exp();
            a[(i, (i + 1) % n)] = s;
            a[(i, (i + n - 1) % n)] = s;
        }
        let dense = a.lu().solve(&DVector::from_vec(g)).unwrap();
        for (a, b) in u.iter().zip(dense.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn rejects_degenerate_potential_and_bad_sizes() {
        let grid = build_grid(8).unwrap();
        let g = source_term(&grid);
        assert!(matches!(
            solve_forward(&vec![-1e4; grid.len()], &grid, &g),
            Err(Error::SingularSystem(_))
        ));
        assert!(solve_forward(&[0.0; 3], &grid, &g).is_err());
    }

    #[test]
    fn precision_examples() {
        let grid = build_grid(20).unwrap();
        let p = prior_precision(&grid, 1.0).unwrap();
        assert!((&p - p.transpose()).amax() <= 1e-12 * p.amax());
        assert!(SymmetricEigen::new(p.clone()).eigenvalues.min() > 0.0);
        let n = grid.len();
        let base = DMatrix::from_element(n, n, 1.0 / n as f64) - periodic_laplacian(&grid);
        let ones = DVector::from_element(n, 1.0);
        assert!((&base * &ones - &ones).amax() <= 1e-10);
        assert!(prior_precision(&grid, 0.0).is_err());
    }

    #[test]
    fn sampled_trace_matches_covariance() {
        let grid = build_grid(20).unwrap();
        let sampler = PriorSampler::new(&grid, 1.0).unwrap();
        let cov = prior_precision(&grid, 1.0).unwrap().try_inverse().unwrap();
        let mut rng = rng::stream(1, &[rng::purpose::ENSEMBLE]);
        let draws = 10_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            acc += sampler.sample(&mut rng).norm_squared();
        }
        let est = acc / draws as f64;
        assert!(
            (est / cov.trace() - 1.0).abs() <= 0.05,
            "{est} vs {}",
            cov.trace()
        );
    }

    #[test]
    fn noiseless_run_with_large_threshold_stops_at_once() {
        let prob = SchrodingerProblem::standard(30, 0.0, 1.0).unwrap();
        let cfg = InversionConfig {
            j: 8,
            kappa: Some(1e6),
            dt: Some(1.0),
            ..InversionConfig::default()
        };
        let run = run_schrodinger_inversion(&prob, &cfg).unwrap();
        assert_eq!(run.outcome.report.residuals.len(), 1);
        assert!(run.outcome.report.converged);
        let prior = PriorSampler::new(&prob.grid, 1.0)
            .unwrap()
            .sample_ensemble(8, 0)
            .unwrap();
        assert_eq!(run.outcome.ensemble.mean(), prior.mean());
        assert!(run_schrodinger_inversion(&prob, &InversionConfig::default()).is_err());
    }

    #[test]
    fn inversion_is_seed_deterministic() {
        let prob = SchrodingerProblem::standard(30, 0.1, 1.0).unwrap();
        let cfg = InversionConfig {
            j: 10,
            k_max: 20,
            seed: 4,
            ..InversionConfig::default()
        };
        let a = run_schrodinger_inversion(&prob, &cfg).unwrap();
        let b = run_schrodinger_inversion(&prob, &cfg).unwrap();
        assert_eq!(a.outcome.report, b.outcome.report);
        assert_eq!(a.outcome.ensemble, b.outcome.ensemble);
    }

    proptest! {
        #[test]
        fn forward_is_linear_in_source(
            theta in proptest::collection::vec(-1.0f64..1.0, 17),
            g1 in proptest::collection::vec(-1.0f64..1.0, 17),
            g2 in proptest::collection::vec(-1.0f64..1.0, 17),
        ) {
            let grid = build_grid(16).unwrap();
            let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
            let u1 = solve_forward(&theta, &grid, &g1).unwrap();
            let u2 = solve_forward(&theta, &grid, &g2).unwrap();
            let u = solve_forward(&theta, &grid, &sum).unwrap();
            for k in 0..17 {
                prop_assert!((u[k] - u1[k] - u2[k]).abs() <= 1e-10);
            }
        }
    }
}
