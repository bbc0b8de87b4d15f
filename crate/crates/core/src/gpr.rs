//! Gaussian process conditioning on point data and marginal-likelihood
//! hyperparameter estimation.
//!
//! Fields are represented discretely by their mean vector and covariance
//! matrix on the grid cell centers. Observation locations are snapped to the
//! nearest cell before use.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::grid::{Grid, Point};
use crate::kernels::{KernelFamily, KernelSpec, DEFAULT_JITTER};
use crate::optim::{lbfgs, Bounds, LbfgsOptions};
use crate::random;

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    locations: Vec<Point>,
    values: DVector<f64>,
    noise_cov: DMatrix<f64>,
}

impl ObservationSet {
    pub fn new(locations: Vec<Point>, values: DVector<f64>, noise_cov: DMatrix<f64>) -> Result<Self> {
        let n = locations.len();
        if values.len() != n {
            return Err(Error::DimensionMismatch {
                what: "observation values",
                expected: n,
                found: values.len(),
            });
        }
        if noise_cov.nrows() != n || noise_cov.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "observation noise covariance",
                expected: n,
                found: noise_cov.nrows().max(noise_cov.ncols()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation values"));
        }
        Ok(Self {
            locations,
            values,
            noise_cov,
        })
    }

    pub fn noiseless(locations: Vec<Point>, values: Vec<f64>) -> Result<Self> {
        let n = locations.len();
        Self::new(locations, DVector::from_vec(values), DMatrix::zeros(n, n))
    }

    /// Independent errors with the given per-observation variances.
    pub fn with_noise_variances(locations: Vec<Point>, values: Vec<f64>, variances: &[f64]) -> Result<Self> {
        let noise = DMatrix::from_diagonal(&DVector::from_column_slice(variances));
        Self::new(locations, DVector::from_vec(values), noise)
    }

    pub fn empty() -> Self {
        Self {
            locations: Vec::new(),
            values: DVector::zeros(0),
            noise_cov: DMatrix::zeros(0, 0),
        }
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn locations(&self) -> &[Point] {
        &self.locations
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn is_noiseless(&self) -> bool {
        self.noise_cov.iter().all(|v| *v == 0.0)
    }

    pub fn cells(&self, grid: &Grid) -> Result<Vec<usize>> {
        grid.nearest_cells(&self.locations)
    }

    /// Locations moved onto the centers of their cells.
    pub fn snapped(&self, grid: &Grid) -> Result<Self> {
        let locations = self.cells(grid)?.into_iter().map(|k| grid.center(k)).collect();
        Ok(Self {
            locations,
            ..self.clone()
        })
    }
}

/// Mean and covariance of a Gaussian field on grid cell centers.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFieldModel {
    grid: Grid,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianFieldModel {
    pub fn new(grid: Grid, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = grid.len();
        if mean.len() != n {
            return Err(Error::DimensionMismatch {
                what: "field mean",
                expected: n,
                found: mean.len(),
            });
        }
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "field covariance",
                expected: n,
                found: cov.nrows(),
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field model"));
        }
        Ok(Self { grid, mean, cov })
    }

    /// Zero-mean prior with the kernel's covariance on cell centers.
    pub fn from_kernel(grid: &Grid, kernel: &KernelSpec) -> Self {
        let cov = kernel.covariance(grid.centers());
        Self {
            mean: DVector::zeros(grid.len()),
            grid: grid.clone(),
            cov,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn variance(&self) -> DVector<f64> {
        self.cov.diagonal()
    }

    pub fn into_parts(self) -> (Grid, DVector<f64>, DMatrix<f64>) {
        (self.grid, self.mean, self.cov)
    }
}

/// Cholesky of `a + jitter * I`, escalating the jitter from zero up to
/// `1e-6 * scale`. Returns the factor and the jitter used.
pub(crate) fn cholesky_with_jitter(a: &DMatrix<f64>, scale: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut last = 0.0;
    for rel in [0.0, 1e-12, 1e-10, 1e-8, 1e-6] {
        let jitter = rel * scale;
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            return Ok((ch, jitter));
        }
        last = jitter;
    }
    Err(Error::FactorizationFailed { jitter: last })
}

/// Conditions `model` on `obs`, returning the conditional mean and covariance
/// on the grid.
pub fn condition(model: &GaussianFieldModel, obs: &ObservationSet) -> Result<GaussianFieldModel> {
    if obs.is_empty() {
        return Ok(model.clone());
    }
    let grid = model.grid();
    let cells = obs.cells(grid)?;
    let n = cells.len();

    let noise = obs.noise_cov();
    let mut duplicates = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            if cells[a] == cells[b] && noise[(a, a)] == 0.0 && noise[(b, b)] == 0.0 {
                let c = grid.center(cells[a]);
                duplicates.push([c.x1, c.x2]);
            }
        }
    }
    if !duplicates.is_empty() {
        return Err(Error::ConditioningFailed { duplicates });
    }

    let cov = model.cov();
    let c_s = DMatrix::from_fn(n, n, |i, j| cov[(cells[i], cells[j])] + noise[(i, j)]);
    let scale = c_s.diagonal().max();
    let (chol, _) = cholesky_with_jitter(&c_s, scale).map_err(|_| Error::ConditioningFailed {
        duplicates: Vec::new(),
    })?;
    let l = chol.l();

    // cross covariance C(X_s, x) for all cells, n x N
    let mut cross = DMatrix::zeros(n, grid.len());
    for (i, &c) in cells.iter().enumerate() {
        cross.row_mut(i).copy_from(&cov.row(c));
    }
    let v = l
        .solve_lower_triangular(&cross)
        .ok_or_else(|| Error::ConditioningFailed { duplicates: Vec::new() })?;
    let mean = model.mean();
    let innovation = DVector::from_fn(n, |i, _| obs.values()[i] - mean[cells[i]]);
    let w = l
        .solve_lower_triangular(&innovation)
        .ok_or_else(|| Error::ConditioningFailed { duplicates: Vec::new() })?;

    let new_mean = mean + v.tr_mul(&w);
    let mut new_cov = cov.clone();
    new_cov.gemm_tr(-1.0, &v, &v, 1.0);
    symmetrize(&mut new_cov);
    GaussianFieldModel::new(grid.clone(), new_mean, new_cov)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Log marginal likelihood of zero-mean data under `kernel`, and its gradient
/// with respect to `(ln sigma, ln length)`.
///
/// The data covariance is `sigma^2 (R + jitter I) + Sigma`, with `R` the
/// kernel correlation matrix and the default relative jitter.
pub fn log_marginal_likelihood(kernel: &KernelSpec, obs: &ObservationSet) -> Result<(f64, [f64; 2])> {
    kernel.validate()?;
    let n = obs.len();
    let pts = obs.locations();
    let var = kernel.variance();
    let mut c = kernel.covariance(pts);
    let mut dlen = DMatrix::zeros(n, n);
    for j in 0..n {
        c[(j, j)] += var * DEFAULT_JITTER;
        for i in 0..n {
            dlen[(i, j)] = kernel.dlog_length(pts[i].distance(&pts[j]));
        }
    }
    let dsig = &c * 2.0;
    c += obs.noise_cov();

    let chol = c.cholesky().ok_or(Error::FactorizationFailed { jitter: var * DEFAULT_JITTER })?;
    let z = obs.values();
    let alpha = chol.solve(z);
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let value = -0.5 * z.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    let inv = chol.inverse();
    // 1/2 tr((alpha alpha^T - C^{-1}) dC)
    let grad = |dc: &DMatrix<f64>| {
        let fit = alpha.dot(&(dc * &alpha));
        let trace: f64 = inv.iter().zip(dc.iter()).map(|(a, b)| a * b).sum();
        0.5 * (fit - trace)
    };
    Ok((value, [grad(&dsig), grad(&dlen)]))
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub starts: usize,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            seed: 0,
            max_iters: 200,
        }
    }
}

pub const SIGMA_BOUNDS: (f64, f64) = (1e-3, 1e3);
pub const LENGTH_BOUNDS: (f64, f64) = (1e-3, 10.0);

/// Maximizes the log marginal likelihood over `(sigma, length)` within
/// [`SIGMA_BOUNDS`] x [`LENGTH_BOUNDS`] by multi-start L-BFGS in log space.
pub fn fit_hyperparameters(family: KernelFamily, obs: &ObservationSet, opts: &FitOptions) -> Result<KernelSpec> {
    if obs.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "hyperparameter fitting needs at least 3 observations, got {}",
            obs.len()
        )));
    }
    let lower = DVector::from_vec(vec![SIGMA_BOUNDS.0.ln(), LENGTH_BOUNDS.0.ln()]);
    let upper = DVector::from_vec(vec![SIGMA_BOUNDS.1.ln(), LENGTH_BOUNDS.1.ln()]);
    let objective = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let kernel = KernelSpec {
            family,
            sigma: x[0].exp(),
            length: x[1].exp(),
        };
        Ok(match log_marginal_likelihood(&kernel, obs) {
            Ok((v, g)) => (-v, DVector::from_vec(vec![-g[0], -g[1]])),
            Err(_) => (f64::INFINITY, DVector::zeros(2)),
        })
    };

    let mut rng = random::stream(opts.seed, 0x6B65_726E);
    let lbfgs_opts = LbfgsOptions {
        max_iters: opts.max_iters,
        grad_tol: 1e-6,
        ftol: 1e-12,
        ..Default::default()
    };
    let mut best: Option<(f64, DVector<f64>, f64, bool)> = None;
    for _ in 0..opts.starts.max(1) {
        let x0 = DVector::from_fn(2, |i, _| rng.random_range(lower[i]..upper[i]));
        if !objective(&x0)?.0.is_finite() {
            continue;
        }
        let m = lbfgs(
            objective,
            x0,
            Some(Bounds {
                lower: &lower,
                upper: &upper,
            }),
            &lbfgs_opts,
        )?;
        let converged = m.termination.is_converged();
        let better = match &best {
            None => true,
            Some((v, _, _, c)) => (converged && !c) || (converged == *c && m.value < *v),
        };
        if better {
            best = Some((m.value, m.x, m.grad_norm, converged));
        }
    }
    match best {
        Some((_, x, _, true)) => KernelSpec::new(family, x[0].exp(), x[1].exp()),
        Some((value, x, grad_norm, false)) => Err(Error::NotConverged {
            message: "marginal likelihood maximization failed from every start".into(),
            best: vec![x[0].exp(), x[1].exp()],
            best_value: -value,
            grad_norm,
        }),
        None => Err(Error::NotConverged {
            message: "no start produced a finite marginal likelihood".into(),
            best: Vec::new(),
            best_value: f64::NAN,
            grad_norm: f64::NAN,
        }),
    }
}
