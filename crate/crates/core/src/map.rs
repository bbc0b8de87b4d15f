//! Reduced-space MAP baseline: minimize over grid values of `y`
//!
//! ```text
//! |u(y)[X_u] - u_s|^2 + |y[X_y] - y_s|^2 + gamma |grad y|^2
//! ```
//!
//! with `u(y)` the finite-volume solution. The state misfit gradient comes from
//! the discrete adjoint of `A(y) u = b(y)`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fv::ResidualOperator;
use crate::gpr::ObservationSet;
use crate::grid::Grid;
use crate::optim::{self, LbfgsOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub gamma: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            gamma: 1e-6,
            max_iters: 50_000,
            grad_tol: 1e-9,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.grad_tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid MAP settings: gamma = {}, grad_tol = {}, max_iters = {}",
                self.gamma, self.grad_tol, self.max_iters
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub y_est: Vec<f64>,
    pub u_est: Vec<f64>,
    pub objective_history: Vec<f64>,
    pub converged: bool,
    pub final_grad_norm: f64,
}

/// The MAP objective with observation cells resolved on the grid.
pub struct MapObjective<'a> {
    op: &'a ResidualOperator,
    full: ResidualOperator,
    y_cells: Vec<usize>,
    y_values: DVector<f64>,
    u_cells: Vec<usize>,
    u_values: DVector<f64>,
    gamma: f64,
}

impl<'a> MapObjective<'a> {
    pub fn new(y_obs: &ObservationSet, u_obs: &ObservationSet, op: &'a ResidualOperator, gamma: f64) -> Result<Self> {
        let grid = op.grid();
        Ok(Self {
            op,
            full: ResidualOperator::with_boundary(grid, op.boundary()),
            y_cells: y_obs.cells(grid)?,
            y_values: y_obs.values().clone(),
            u_cells: u_obs.cells(grid)?,
            u_values: u_obs.values().clone(),
            gamma,
        })
    }

    fn grid(&self) -> &Grid {
        self.op.grid()
    }

    pub fn value(&self, y: &DVector<f64>) -> Result<f64> {
        let u = self.op.solve(y)?;
        Ok(self.misfit(y, &u).0 + self.gamma * gradient_penalty(self.grid(), y).0)
    }

    fn misfit(&self, y: &DVector<f64>, u: &DVector<f64>) -> (f64, DVector<f64>, DVector<f64>) {
        let n = y.len();
        let mut value = 0.0;
        let mut dy = DVector::zeros(n);
        let mut du = DVector::zeros(n);
        for (&c, &v) in self.y_cells.iter().zip(self.y_values.iter()) {
            let d = y[c] - v;
            value += d * d;
            dy[c] += 2.0 * d;
        }
        for (&c, &v) in self.u_cells.iter().zip(self.u_values.iter()) {
            let d = u[c] - v;
            value += d * d;
            du[c] += 2.0 * d;
        }
        (value, dy, du)
    }

    pub fn value_and_gradient(&self, y: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let sys = self.op.assemble(y)?;
        let a = crate::fv::Factored::new(&sys.matrix, self.grid().nx());
        let u = a.solve(&sys.rhs)?;
        let (misfit, mut grad, du) = self.misfit(y, &u);
        let (reg, reg_grad) = gradient_penalty(self.grid(), y);
        grad += reg_grad * self.gamma;
        if du.iter().any(|&v| v != 0.0) {
            // A is symmetric, so the adjoint system reuses its factor
            let lambda = a.solve(&du)?;
            let (_, dr_dy) = self.full.residual_jacobians(&u, y)?;
            grad -= dr_dy.tr_mul_vec(&lambda);
        }
        Ok((misfit + self.gamma * reg, grad))
    }
}

/// `sum |forward difference / h|^2 * cell area` and its gradient. Differences
/// that would reach outside the grid are omitted.
pub fn gradient_penalty(grid: &Grid, y: &DVector<f64>) -> (f64, DVector<f64>) {
    let (nx, ny) = (grid.nx(), grid.ny());
    let wx = grid.cell_area() / (grid.hx() * grid.hx());
    let wy = grid.cell_area() / (grid.hy() * grid.hy());
    let mut value = 0.0;
    let mut grad = DVector::zeros(y.len());
    for j in 0..ny {
        for i in 0..nx {
            let k = grid.index(i, j);
            if i + 1 < nx {
                let d = y[k + 1] - y[k];
                value += wx * d * d;
                grad[k + 1] += 2.0 * wx * d;
                grad[k] -= 2.0 * wx * d;
            }
            if j + 1 < ny {
                let d = y[k + nx] - y[k];
                value += wy * d * d;
                grad[k + nx] += 2.0 * wy * d;
                grad[k] -= 2.0 * wy * d;
            }
        }
    }
    (value, grad)
}

/// L-BFGS from `y = 0`.
pub fn map_invert(y_obs: &ObservationSet, u_obs: &ObservationSet, op: &ResidualOperator, cfg: &MapConfig) -> Result<MapResult> {
    cfg.validate()?;
    let obj = MapObjective::new(y_obs, u_obs, op, cfg.gamma)?;
    let opts = LbfgsOptions {
        max_iters: cfg.max_iters,
        grad_tol: cfg.grad_tol,
        ftol: 1e-15,
        max_step: 1.0,
        ..Default::default()
    };
    let m = optim::lbfgs(|y| obj.value_and_gradient(y), DVector::zeros(op.grid().len()), None, &opts)?;
    let u = op.solve(&m.x)?;
    Ok(MapResult {
        y_est: m.x.as_slice().to_vec(),
        u_est: u.as_slice().to_vec(),
        objective_history: m.history,
        converged: m.termination.is_converged(),
        final_grad_norm: m.grad_norm,
    })
}
