//! Truncated (conditional) Karhunen-Loeve expansions on the grid.
//!
//! The integral eigenproblem is discretized by the midpoint rule: the matrix
//! `(hx * hy) * C` is eigendecomposed and the eigenvectors are rescaled to unit
//! norm under the cell-area-weighted inner product. Mode column `i` stores
//! `sqrt(lambda_i) * phi_i` at cell centers, so a field is `mean + modes * coeffs`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gpr::GaussianFieldModel;
use crate::grid::Grid;
use crate::random;

#[derive(Clone, Debug, PartialEq)]
pub struct Ckle {
    grid: Grid,
    mean: DVector<f64>,
    modes: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    /// Sum of all positive eigenvalues of the untruncated problem.
    total_variance: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Truncation {
    /// Minimum fraction of the total variance to retain.
    pub capture: Option<f64>,
    /// Maximum discarded variance.
    pub atol: Option<f64>,
    pub max_terms: Option<usize>,
}

impl Truncation {
    pub fn capture(fraction: f64) -> Self {
        Self {
            capture: Some(fraction),
            ..Default::default()
        }
    }

    pub fn terms(m: usize) -> Self {
        Self {
            max_terms: Some(m),
            ..Default::default()
        }
    }

    /// Number of retained terms for a nonincreasing positive spectrum.
    pub fn select(&self, eigenvalues: &[f64]) -> usize {
        let total: f64 = eigenvalues.iter().sum();
        let mut m = eigenvalues.len();
        if self.capture.is_some() || self.atol.is_some() {
            let mut retained = 0.0;
            m = eigenvalues.len();
            for (i, lam) in eigenvalues.iter().enumerate() {
                let ok_rel = self.capture.is_none_or(|c| retained >= c * total);
                let ok_abs = self.atol.is_none_or(|a| total - retained <= a);
                if ok_rel && ok_abs {
                    m = i;
                    break;
                }
                retained += lam;
            }
        }
        match self.max_terms {
            Some(cap) => m.min(cap),
            None => m,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.capture.is_none() && self.atol.is_none() && self.max_terms.is_none() {
            return Err(Error::InvalidArgument("truncation needs capture, atol or max_terms".into()));
        }
        if let Some(c) = self.capture {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::InvalidArgument(format!("capture fraction {c} not in (0, 1]")));
            }
        }
        if let Some(a) = self.atol {
            if !(a >= 0.0) {
                return Err(Error::InvalidArgument(format!("atol {a} is negative")));
            }
        }
        if self.max_terms == Some(0) {
            return Err(Error::InvalidArgument("max_terms must be positive".into()));
        }
        Ok(())
    }
}

/// Eigendecomposes the model covariance and keeps the leading modes.
///
/// Eigenvalues at or below `N * eps * lambda_max` are treated as zero and dropped.
pub fn decompose(model: &GaussianFieldModel, truncation: Truncation) -> Result<Ckle> {
    truncation.validate()?;
    let grid = model.grid();
    let area = grid.cell_area();
    let n = grid.len();

    let eig = (model.cov() * area).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let largest = eig.eigenvalues[order[0]];
    if !(largest > 0.0) {
        return Err(Error::DegenerateField);
    }
    let floor = n as f64 * f64::EPSILON * largest;
    let positive: Vec<f64> = order
        .iter()
        .map(|&i| eig.eigenvalues[i])
        .take_while(|&l| l > floor)
        .collect();
    let total_variance: f64 = positive.iter().sum();
    let m = truncation.select(&positive);

    let scale = 1.0 / area.sqrt();
    let mut modes = DMatrix::zeros(n, m);
    for (col, &i) in order.iter().take(m).enumerate() {
        let s = eig.eigenvalues[i].sqrt() * scale;
        let v = eig.eigenvectors.column(i);
        // fix the sign so the largest-magnitude entry is positive
        let pivot = v.iamax();
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        modes.column_mut(col).copy_from(&(v * (s * sign)));
    }
    Ok(Ckle {
        grid: grid.clone(),
        mean: model.mean().clone(),
        modes,
        eigenvalues: DVector::from_column_slice(&positive[..m]),
        total_variance,
    })
}

impl Ckle {
    /// Expansion without random modes: every evaluation returns `mean`.
    pub fn deterministic(grid: &Grid, mean: DVector<f64>) -> Result<Self> {
        Self::from_parts(grid.clone(), mean, DMatrix::zeros(grid.len(), 0), DVector::zeros(0), 0.0)
    }

    pub fn from_parts(
        grid: Grid,
        mean: DVector<f64>,
        modes: DMatrix<f64>,
        eigenvalues: DVector<f64>,
        total_variance: f64,
    ) -> Result<Self> {
        let n = grid.len();
        if mean.len() != n || modes.nrows() != n {
            return Err(Error::DimensionMismatch {
                what: "expansion rows",
                expected: n,
                found: if mean.len() != n { mean.len() } else { modes.nrows() },
            });
        }
        if modes.ncols() != eigenvalues.len() {
            return Err(Error::DimensionMismatch {
                what: "expansion modes",
                expected: eigenvalues.len(),
                found: modes.ncols(),
            });
        }
        Ok(Self {
            grid,
            mean,
            modes,
            eigenvalues,
            total_variance,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// `N x M` matrix of scaled modes.
    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn terms(&self) -> usize {
        self.modes.ncols()
    }

    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    pub fn retained_variance(&self) -> f64 {
        self.eigenvalues.sum()
    }

    /// Discarded bulk variance (sum of the dropped eigenvalues).
    pub fn tail_variance(&self) -> f64 {
        (self.total_variance - self.retained_variance()).max(0.0)
    }

    /// The leading `m` terms (or all of them, if fewer are available).
    pub fn truncated(&self, m: usize) -> Ckle {
        let m = m.min(self.terms());
        Ckle {
            grid: self.grid.clone(),
            mean: self.mean.clone(),
            modes: self.modes.columns(0, m).into_owned(),
            eigenvalues: self.eigenvalues.rows(0, m).into_owned(),
            total_variance: self.total_variance,
        }
    }

    pub fn evaluate(&self, coeffs: &DVector<f64>) -> Result<DVector<f64>> {
        if coeffs.len() != self.terms() {
            return Err(Error::DimensionMismatch {
                what: "expansion coefficients",
                expected: self.terms(),
                found: coeffs.len(),
            });
        }
        Ok(&self.mean + &self.modes * coeffs)
    }

    /// Standard-normal coefficients of draw `index` under `seed`.
    pub fn sample_coefficients(&self, seed: u64, index: u64) -> DVector<f64> {
        let mut rng = random::stream(seed, index);
        DVector::from_vec(random::standard_normals(&mut rng, self.terms()))
    }

    /// `count` realizations; draw `i` uses the random stream `(seed, i)`.
    pub fn sample(&self, seed: u64, count: usize) -> Vec<DVector<f64>> {
        (0..count as u64)
            .map(|i| &self.mean + &self.modes * self.sample_coefficients(seed, i))
            .collect()
    }

    /// Little-endian binary artifact:
    /// `b"CKLE0001"`, nx, ny, M (u64), total variance, mean (N), eigenvalues (M),
    /// modes column-major (N*M), all f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.grid.nx() as u64, self.grid.ny() as u64, self.terms() as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.total_variance.to_le_bytes())?;
        for v in self.mean.iter().chain(self.eigenvalues.iter()).chain(self.modes.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an expansion artifact".into()));
        }
        let mut u = [0u64; 3];
        for slot in &mut u {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *slot = u64::from_le_bytes(b);
        }
        let grid = Grid::new(u[0] as usize, u[1] as usize)?;
        let (n, m) = (grid.len(), u[2] as usize);
        let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; count * 8];
            r.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let total = read_f64s(1)?[0];
        let mean = DVector::from_vec(read_f64s(n)?);
        let eigenvalues = DVector::from_vec(read_f64s(m)?);
        let modes = DMatrix::from_vec(n, m, read_f64s(n * m)?);
        Self::from_parts(grid, mean, modes, eigenvalues, total)
    }
}

const MAGIC: &[u8; 8] = b"CKLE0001";
