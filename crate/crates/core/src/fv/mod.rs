//! Cell-centered finite-volume discretization of
//!
//! ```text
//! div(exp(y) grad u) = 0        on [0,1]^2
//! u = 1 at x1 = 0,  u = 0 at x1 = 1,  zero flux at x2 = 0 and x2 = 1
//! ```
//!
//! with two-point fluxes. Interior faces use the harmonic mean of `exp(y)` in
//! the adjacent cells; Dirichlet faces use the half-cell distance. Row `c` of
//! the system is the net outward flux of cell `c` divided by the mean cell
//! width `h = sqrt(hx * hy)`. On square cells a face then carries
//! `exp(y) / h`, or `2 exp(y) / h` on a Dirichlet boundary. The scale matters
//! because the residual competes with the coefficient penalty.

mod banded;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub use banded::{conjugate_gradient, BandedCholesky};

/// Row-wise sparse matrix; each row holds `(column, value)` pairs sorted by column.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    ncols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(ncols: usize, mut rows: Vec<Vec<(usize, f64)>>) -> Self {
        for row in &mut rows {
            row.sort_by_key(|e| e.0);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for &(c, v) in row.iter() {
                match merged.last_mut() {
                    Some(last) if last.0 == c => last.1 += v,
                    _ => merged.push((c, v)),
                }
            }
            *row = merged;
        }
        Self { ncols, rows }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |e| e.0)
            .map(|p| self.rows[i][p].1)
            .unwrap_or(0.0)
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_fn(self.nrows(), |i, _| self.get(i, i))
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.nrows(),
            self.rows.iter().map(|row| row.iter().map(|&(c, v)| v * x[c]).sum()),
        )
    }

    /// `self^T x`.
    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for (row, xi) in self.rows.iter().zip(x.iter()) {
            for &(c, v) in row {
                out[c] += v * xi;
            }
        }
        out
    }

    /// `self * m` for a dense `m`.
    pub fn mul_dense(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows(), m.ncols());
        for col in 0..m.ncols() {
            let src = m.column(col);
            let mut dst = out.column_mut(col);
            for (i, row) in self.rows.iter().enumerate() {
                dst[i] = row.iter().map(|&(c, v)| v * src[c]).sum();
            }
        }
        out
    }

    /// Scales column `j` by `d[j]`.
    pub fn scale_columns(&mut self, d: &DVector<f64>) {
        for row in &mut self.rows {
            for e in row.iter_mut() {
                e.1 *= d[e.0];
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols);
        for (i, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                m[(i, c)] = v;
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug)]
struct Face {
    a: usize,
    /// Neighbor cell, or `None` for a Dirichlet face.
    b: Option<usize>,
    /// Geometric factor: face length / center distance.
    geom: f64,
    /// Boundary value on Dirichlet faces.
    value: f64,
}

impl Face {
    fn transmissibility(&self, k: &[f64]) -> f64 {
        match self.b {
            Some(b) => self.geom * 2.0 * k[self.a] * k[b] / (k[self.a] + k[b]),
            None => self.geom * k[self.a],
        }
    }

    /// `(dT/dy_a, dT/dy_b)`.
    fn transmissibility_dy(&self, k: &[f64]) -> (f64, f64) {
        match self.b {
            Some(b) => {
                let (ka, kb) = (k[self.a], k[b]);
                let s = (ka + kb) * (ka + kb);
                (self.geom * 2.0 * ka * kb * kb / s, self.geom * 2.0 * kb * ka * ka / s)
            }
            None => (self.geom * k[self.a], 0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryValues {
    /// `u` at x1 = 0.
    pub left: f64,
    /// `u` at x1 = 1.
    pub right: f64,
}

impl Default for BoundaryValues {
    fn default() -> Self {
        Self { left: 1.0, right: 0.0 }
    }
}

/// The linear system `A(y) u = b(y)`.
#[derive(Clone, Debug)]
pub struct FvSystem {
    pub matrix: SparseRows,
    pub rhs: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct ResidualOperator {
    grid: Grid,
    bc: BoundaryValues,
    faces: Vec<Face>,
    residual_cells: Vec<usize>,
}

impl ResidualOperator {
    /// Residuals at every cell.
    pub fn new(grid: &Grid) -> Self {
        Self::with_boundary(grid, BoundaryValues::default())
    }

    pub fn with_boundary(grid: &Grid, bc: BoundaryValues) -> Self {
        let (nx, ny) = (grid.nx(), grid.ny());
        let (hx, hy) = (grid.hx(), grid.hy());
        let h = (hx * hy).sqrt();
        let gx = hy / hx / h;
        let gy = hx / hy / h;
        let mut faces = Vec::with_capacity(2 * grid.len() + ny);
        for j in 0..ny {
            faces.push(Face {
                a: grid.index(0, j),
                b: None,
                geom: 2.0 * gx,
                value: bc.left,
            });
            for i in 0..nx - 1 {
                faces.push(Face {
                    a: grid.index(i, j),
                    b: Some(grid.index(i + 1, j)),
                    geom: gx,
                    value: 0.0,
                });
            }
            faces.push(Face {
                a: grid.index(nx - 1, j),
                b: None,
                geom: 2.0 * gx,
                value: bc.right,
            });
        }
        for j in 0..ny - 1 {
            for i in 0..nx {
                faces.push(Face {
                    a: grid.index(i, j),
                    b: Some(grid.index(i, j + 1)),
                    geom: gy,
                    value: 0.0,
                });
            }
        }
        Self {
            grid: grid.clone(),
            bc,
            faces,
            residual_cells: (0..grid.len()).collect(),
        }
    }

    /// Residuals restricted to `cells`; order and duplicates are normalized away.
    pub fn with_cells(&self, mut cells: Vec<usize>) -> Result<Self> {
        cells.sort_unstable();
        cells.dedup();
        if cells.is_empty() {
            return Err(Error::InvalidArgument("residual cell set is empty".into()));
        }
        if let Some(&bad) = cells.iter().find(|&&c| c >= self.grid.len()) {
            return Err(Error::InvalidArgument(format!("residual cell {bad} outside grid")));
        }
        Ok(Self {
            residual_cells: cells,
            ..self.clone()
        })
    }

    /// Keeps cells whose `(i, j)` are both multiples of `factor`.
    pub fn subsample(&self, factor: usize) -> Result<Self> {
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        if factor == 0 || nx % factor != 0 || ny % factor != 0 {
            return Err(Error::InvalidSubsample { factor, nx, ny });
        }
        let cells = (0..self.grid.len())
            .filter(|&k| {
                let (i, j) = self.grid.ij(k);
                i % factor == 0 && j % factor == 0
            })
            .collect();
        self.with_cells(cells)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn boundary(&self) -> BoundaryValues {
        self.bc
    }

    pub fn residual_cells(&self) -> &[usize] {
        &self.residual_cells
    }

    pub fn residual_len(&self) -> usize {
        self.residual_cells.len()
    }

    fn check(&self, what: &'static str, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.grid.len() {
            return Err(Error::DimensionMismatch {
                what,
                expected: self.grid.len(),
                found: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(what));
        }
        Ok(())
    }

    fn conductivity(&self, y: &DVector<f64>) -> Result<Vec<f64>> {
        self.check("log-diffusion field", y)?;
        let k: Vec<f64> = y.iter().map(|v| v.exp()).collect();
        if k.iter().any(|v| !v.is_finite() || *v == 0.0) {
            return Err(Error::NonFinite("exp(y)"));
        }
        Ok(k)
    }

    /// Full `N x N` system for the log-diffusion field `y`.
    pub fn assemble(&self, y: &DVector<f64>) -> Result<FvSystem> {
        let k = self.conductivity(y)?;
        let n = self.grid.len();
        let mut rows = vec![Vec::with_capacity(5); n];
        let mut rhs = DVector::zeros(n);
        for f in &self.faces {
            let t = f.transmissibility(&k);
            rows[f.a].push((f.a, t));
            match f.b {
                Some(b) => {
                    rows[b].push((b, t));
                    rows[f.a].push((b, -t));
                    rows[b].push((f.a, -t));
                }
                None => rhs[f.a] += t * f.value,
            }
        }
        Ok(FvSystem {
            matrix: SparseRows::new(n, rows),
            rhs,
        })
    }

    /// Solves `A(y) u = b(y)` with relative residual at most 1e-10.
    pub fn solve(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let sys = self.assemble(y)?;
        solve_system(&sys, self.grid.nx())
    }

    /// `A(y) u - b(y)` at the residual cells.
    pub fn residual(&self, u: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check("state field", u)?;
        let k = self.conductivity(y)?;
        let mut full = DVector::zeros(self.grid.len());
        for f in &self.faces {
            let t = f.transmissibility(&k);
            match f.b {
                Some(b) => {
                    let flux = t * (u[f.a] - u[b]);
                    full[f.a] += flux;
                    full[b] -= flux;
                }
                None => full[f.a] += t * (u[f.a] - f.value),
            }
        }
        Ok(DVector::from_iterator(
            self.residual_len(),
            self.residual_cells.iter().map(|&c| full[c]),
        ))
    }

    /// `(dr/du, dr/dy)`, each `N_r x N`.
    pub fn residual_jacobians(&self, u: &DVector<f64>, y: &DVector<f64>) -> Result<(SparseRows, SparseRows)> {
        self.check("state field", u)?;
        let k = self.conductivity(y)?;
        let n = self.grid.len();
        let mut row_of = vec![usize::MAX; n];
        for (r, &c) in self.residual_cells.iter().enumerate() {
            row_of[c] = r;
        }
        let nr = self.residual_len();
        let mut du = vec![Vec::with_capacity(5); nr];
        let mut dy = vec![Vec::with_capacity(5); nr];
        for f in &self.faces {
            let t = f.transmissibility(&k);
            let (ta, tb) = f.transmissibility_dy(&k);
            let ra = row_of[f.a];
            match f.b {
                Some(b) => {
                    let diff = u[f.a] - u[b];
                    if ra != usize::MAX {
                        du[ra].push((f.a, t));
                        du[ra].push((b, -t));
                        dy[ra].push((f.a, ta * diff));
                        dy[ra].push((b, tb * diff));
                    }
                    let rb = row_of[b];
                    if rb != usize::MAX {
                        du[rb].push((b, t));
                        du[rb].push((f.a, -t));
                        dy[rb].push((f.a, -ta * diff));
                        dy[rb].push((b, -tb * diff));
                    }
                }
                None => {
                    if ra != usize::MAX {
                        du[ra].push((f.a, t));
                        dy[ra].push((f.a, ta * (u[f.a] - f.value)));
                    }
                }
            }
        }
        Ok((SparseRows::new(n, du), SparseRows::new(n, dy)))
    }

    /// Total flux entering through x1 = 0 and leaving through x1 = 1, in the
    /// row scaling of the residual.
    pub fn boundary_fluxes(&self, u: &DVector<f64>, y: &DVector<f64>) -> Result<(f64, f64)> {
        self.check("state field", u)?;
        let k = self.conductivity(y)?;
        let (mut inflow, mut outflow) = (0.0, 0.0);
        for f in self.faces.iter().filter(|f| f.b.is_none()) {
            let t = f.transmissibility(&k);
            let (i, _) = self.grid.ij(f.a);
            if i == 0 {
                inflow += t * (f.value - u[f.a]);
            } else {
                outflow += t * (u[f.a] - f.value);
            }
        }
        Ok((inflow, outflow))
    }
}

/// A system matrix factored once and solved against several right-hand sides
/// (the forward and adjoint problems share the symmetric matrix).
pub struct Factored<'a> {
    matrix: &'a SparseRows,
    chol: Option<BandedCholesky>,
}

impl<'a> Factored<'a> {
    pub fn new(matrix: &'a SparseRows, bandwidth: usize) -> Self {
        Self {
            matrix,
            chol: BandedCholesky::factor(matrix, bandwidth),
        }
    }

    /// Banded Cholesky with one refinement step, falling back to CG; the
    /// relative residual must reach 1e-10.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let a = self.matrix;
        let bnorm = rhs.norm().max(f64::MIN_POSITIVE);
        let rel = |u: &DVector<f64>| (a.mul_vec(u) - rhs).norm() / bnorm;
        if let Some(ch) = &self.chol {
            let mut u = ch.solve(rhs);
            if rel(&u) > 1e-10 {
                let r = rhs - a.mul_vec(&u);
                u += ch.solve(&r);
            }
            if rel(&u) <= 1e-10 {
                return Ok(u);
            }
        }
        let (u, r) = conjugate_gradient(a, rhs, 1e-12, 20 * rhs.len());
        if r <= 1e-10 {
            Ok(u)
        } else {
            let d = a.diagonal();
            Err(Error::SolverBreakdown(format!(
                "relative residual {r:.3e} after CG; diagonal range [{:.3e}, {:.3e}]",
                d.min(),
                d.max()
            )))
        }
    }
}

pub fn solve_system(sys: &FvSystem, bandwidth: usize) -> Result<DVector<f64>> {
    Factored::new(&sys.matrix, bandwidth).solve(&sys.rhs)
}
