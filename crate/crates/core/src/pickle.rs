//! Physics-informed inversion over cKLE coefficients: minimize
//!
//! ```text
//! F(xi, eta) = |r[u(eta), y(xi)]|^2 + gamma (|xi|^2 + |eta|^2)
//! ```
//!
//! where `y(xi)` and `u(eta)` are the conditional expansions of the parameter
//! and the state and `r` is the finite-volume residual.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fv::ResidualOperator;
use crate::kle::Ckle;
use crate::latent::BinaryFieldSpec;
use crate::optim::{self, LbfgsOptions};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    GaussNewton,
    Lbfgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub gamma: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub n_xi: usize,
    pub n_eta: usize,
    pub optimizer: Optimizer,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            gamma: 1e-6,
            max_iters: 200,
            grad_tol: 1e-8,
            n_xi: 100,
            n_eta: 100,
            optimizer: Optimizer::GaussNewton,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidArgument(format!("grad_tol must be positive, got {}", self.grad_tol)));
        }
        if self.max_iters == 0 || self.n_xi == 0 || self.n_eta == 0 {
            return Err(Error::InvalidArgument("max_iters, n_xi and n_eta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    pub y_est: Vec<f64>,
    pub u_est: Vec<f64>,
    pub objective_history: Vec<f64>,
    pub converged: bool,
    pub final_grad_norm: f64,
}

/// How the parameter expansion maps to the log-diffusion field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamMap {
    Identity,
    /// The expansion describes a latent field pushed through the logistic map.
    Logistic(BinaryFieldSpec),
}

impl ParamMap {
    pub fn apply(&self, f: &DVector<f64>) -> DVector<f64> {
        match self {
            ParamMap::Identity => f.clone(),
            ParamMap::Logistic(spec) => spec.latent_to_y(f),
        }
    }

    /// Entrywise `dy/df`; `None` for the identity.
    pub fn derivative(&self, f: &DVector<f64>) -> Option<DVector<f64>> {
        match self {
            ParamMap::Identity => None,
            ParamMap::Logistic(spec) => Some(spec.dy_df(f)),
        }
    }
}

/// Everything the objective needs, with mode counts already checked.
pub struct Problem<'a> {
    y_ckle: &'a Ckle,
    u_ckle: &'a Ckle,
    op: &'a ResidualOperator,
    map: ParamMap,
    gamma: f64,
}

struct Linearization {
    value: f64,
    residual: DVector<f64>,
    /// `dr/d(xi, eta)`, `N_r x (N_xi + N_eta)`.
    jacobian: DMatrix<f64>,
}

impl<'a> Problem<'a> {
    pub fn new(y_ckle: &'a Ckle, u_ckle: &'a Ckle, op: &'a ResidualOperator, map: ParamMap, gamma: f64) -> Result<Self> {
        if y_ckle.grid() != op.grid() || u_ckle.grid() != op.grid() {
            return Err(Error::InvalidArgument("expansions and residual operator use different grids".into()));
        }
        if !(gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self {
            y_ckle,
            u_ckle,
            op,
            map,
            gamma,
        })
    }

    pub fn n_xi(&self) -> usize {
        self.y_ckle.terms()
    }

    pub fn n_eta(&self) -> usize {
        self.u_ckle.terms()
    }

    pub fn dim(&self) -> usize {
        self.n_xi() + self.n_eta()
    }

    fn split(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "coefficient vector",
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok((x.rows(0, self.n_xi()).into_owned(), x.rows(self.n_xi(), self.n_eta()).into_owned()))
    }

    /// `(y, u)` for stacked coefficients `x = (xi, eta)`.
    pub fn fields(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let (xi, eta) = self.split(x)?;
        let f = self.y_ckle.evaluate(&xi)?;
        Ok((self.map.apply(&f), self.u_ckle.evaluate(&eta)?))
    }

    pub fn value(&self, x: &DVector<f64>) -> Result<f64> {
        let (y, u) = self.fields(x)?;
        let r = self.op.residual(&u, &y)?;
        Ok(r.norm_squared() + self.gamma * x.norm_squared())
    }

    fn linearize(&self, x: &DVector<f64>) -> Result<Linearization> {
        let (xi, eta) = self.split(x)?;
        let f = self.y_ckle.evaluate(&xi)?;
        let y = self.map.apply(&f);
        let u = self.u_ckle.evaluate(&eta)?;
        let residual = self.op.residual(&u, &y)?;
        let (du, mut dy) = self.op.residual_jacobians(&u, &y)?;
        if let Some(d) = self.map.derivative(&f) {
            dy.scale_columns(&d);
        }
        let mut jacobian = DMatrix::zeros(residual.len(), self.dim());
        jacobian
            .columns_mut(0, self.n_xi())
            .copy_from(&dy.mul_dense(self.y_ckle.modes()));
        jacobian
            .columns_mut(self.n_xi(), self.n_eta())
            .copy_from(&du.mul_dense(self.u_ckle.modes()));
        Ok(Linearization {
            value: residual.norm_squared() + self.gamma * x.norm_squared(),
            residual,
            jacobian,
        })
    }

    /// Objective and gradient at stacked coefficients `x = (xi, eta)`.
    pub fn value_and_gradient(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let lin = self.linearize(x)?;
        let grad = (lin.jacobian.tr_mul(&lin.residual) + x * self.gamma) * 2.0;
        Ok((lin.value, grad))
    }
}

/// `F` and `(dF/dxi, dF/deta)` stacked into one vector.
pub fn objective_and_gradient(
    y_ckle: &Ckle,
    u_ckle: &Ckle,
    op: &ResidualOperator,
    gamma: f64,
    xi: &DVector<f64>,
    eta: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let p = Problem::new(y_ckle, u_ckle, op, ParamMap::Identity, gamma)?;
    let x = stack(xi, eta);
    p.value_and_gradient(&x)
}

fn stack(xi: &DVector<f64>, eta: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(xi.len() + eta.len(), xi.iter().chain(eta.iter()).copied())
}

/// Ratio of the first continuation penalty to the target one.
const CONTINUATION_START: f64 = 1e4;

/// Minimizes the objective starting from the conditional means (`xi = eta = 0`).
pub fn invert(y_ckle: &Ckle, u_ckle: &Ckle, op: &ResidualOperator, cfg: &InversionConfig) -> Result<InversionResult> {
    invert_mapped(y_ckle, u_ckle, op, ParamMap::Identity, cfg)
}

pub fn invert_mapped(
    y_ckle: &Ckle,
    u_ckle: &Ckle,
    op: &ResidualOperator,
    map: ParamMap,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    cfg.validate()?;
    if y_ckle.terms() > cfg.n_xi {
        return Err(Error::DimensionMismatch {
            what: "parameter expansion terms",
            expected: cfg.n_xi,
            found: y_ckle.terms(),
        });
    }
    if u_ckle.terms() > cfg.n_eta {
        return Err(Error::DimensionMismatch {
            what: "state expansion terms",
            expected: cfg.n_eta,
            found: u_ckle.terms(),
        });
    }
    let problem = Problem::new(y_ckle, u_ckle, op, map, cfg.gamma)?;
    let mut x0 = DVector::zeros(problem.dim());
    let mut history = Vec::new();
    // Continuation in gamma. The residual alone is smallest where exp(y) is
    // tiny, and a cold start at a small gamma can slide into that valley; a
    // heavier penalty first keeps the iterates near the conditional means.
    let mut stage = cfg.gamma * CONTINUATION_START;
    while stage > cfg.gamma {
        let p = Problem { gamma: stage, ..problem };
        let (x, h, _, _) = gauss_newton(&p, x0, cfg)?;
        x0 = x;
        history.extend(h);
        stage /= 10.0;
    }
    let (x, h, converged, grad_norm) = match cfg.optimizer {
        Optimizer::GaussNewton => gauss_newton(&problem, x0, cfg)?,
        Optimizer::Lbfgs => {
            let opts = LbfgsOptions {
                max_iters: cfg.max_iters,
                grad_tol: cfg.grad_tol,
                ftol: 1e-15,
                ..Default::default()
            };
            let m = optim::lbfgs(|x| problem.value_and_gradient(x), x0, None, &opts)?;
            (m.x, m.history, m.termination.is_converged(), m.grad_norm)
        }
    };
    history.extend(h);
    let (y, u) = problem.fields(&x)?;
    let (xi, eta) = problem.split(&x)?;
    Ok(InversionResult {
        xi: xi.as_slice().to_vec(),
        eta: eta.as_slice().to_vec(),
        y_est: y.as_slice().to_vec(),
        u_est: u.as_slice().to_vec(),
        objective_history: history,
        converged,
        final_grad_norm: grad_norm,
    })
}

/// Damped Gauss-Newton: solves `(J^T J + gamma I) p = -(J^T r + gamma x)` and
/// backtracks until the Armijo condition holds.
fn gauss_newton(p: &Problem<'_>, mut x: DVector<f64>, cfg: &InversionConfig) -> Result<(DVector<f64>, Vec<f64>, bool, f64)> {
    let n = p.dim();
    let mut lin = p.linearize(&x)?;
    if !lin.value.is_finite() {
        return Err(Error::NonFiniteObjective {
            at: x.iter().copied().collect(),
        });
    }
    let mut history = vec![lin.value];
    let mut rhs = -(lin.jacobian.tr_mul(&lin.residual) + &x * p.gamma);
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let grad_norm = 2.0 * rhs.norm();
        if grad_norm <= cfg.grad_tol {
            converged = true;
            break;
        }
        let mut h = lin.jacobian.tr_mul(&lin.jacobian);
        for i in 0..n {
            h[(i, i)] += p.gamma;
        }
        let step = match h.cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => rhs.clone(),
        };
        // directional derivative of F along the step
        let slope = -2.0 * rhs.dot(&step);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &x + &step * t;
            let v = match p.value(&trial) {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(Error::NonFinite(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            if v <= lin.value + 1e-4 * t * slope {
                accepted = Some(trial);
                break;
            }
            t *= 0.5;
        }
        let Some(xn) = accepted else {
            break;
        };
        let previous = lin.value;
        x = xn;
        lin = p.linearize(&x)?;
        if !lin.value.is_finite() {
            return Err(Error::NonFiniteObjective {
                at: x.iter().copied().collect(),
            });
        }
        history.push(lin.value);
        rhs = -(lin.jacobian.tr_mul(&lin.residual) + &x * p.gamma);
        if previous - lin.value <= 1e-15 * previous {
            converged = 2.0 * rhs.norm() <= cfg.grad_tol.max(1e-9 * previous.sqrt());
            break;
        }
    }
    let grad_norm = 2.0 * rhs.norm();
    Ok((x, history, converged || grad_norm <= cfg.grad_tol, grad_norm))
}
