//! Limited-memory BFGS with optional box constraints (projected steps) and
//! Armijo backtracking.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    /// Relative objective decrease fell below `ftol`.
    Stagnation,
    MaxIterations,
    LineSearchFailed,
}

impl Termination {
    pub fn is_converged(self) -> bool {
        matches!(self, Termination::GradientTolerance | Termination::Stagnation)
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub ftol: f64,
    /// Largest trial change of any single coordinate.
    pub max_step: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 500,
            grad_tol: 1e-8,
            ftol: 1e-13,
            max_step: f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub history: Vec<f64>,
    pub termination: Termination,
}

pub struct Bounds<'a> {
    pub lower: &'a DVector<f64>,
    pub upper: &'a DVector<f64>,
}

impl Bounds<'_> {
    fn project(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    /// Gradient with components that push against an active bound zeroed.
    fn projected_gradient(&self, x: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| {
            if (x[i] <= self.lower[i] && g[i] > 0.0) || (x[i] >= self.upper[i] && g[i] < 0.0) {
                0.0
            } else {
                g[i]
            }
        })
    }
}

/// Minimizes `f`, which returns the objective and its gradient.
pub fn lbfgs<F>(
    mut f: F,
    x0: DVector<f64>,
    bounds: Option<Bounds<'_>>,
    opts: &LbfgsOptions,
) -> Result<Minimum>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let mut x = x0;
    if let Some(b) = &bounds {
        b.project(&mut x);
    }
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() {
        return Err(Error::NonFiniteObjective {
            at: x.iter().copied().collect(),
        });
    }
    let pgrad = |x: &DVector<f64>, g: &DVector<f64>| match &bounds {
        Some(b) => b.projected_gradient(x, g),
        None => g.clone(),
    };

    let mut history = vec![fx];
    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut pg = pgrad(&x, &g);
    let mut iterations = 0;

    let termination = loop {
        if pg.norm() <= opts.grad_tol {
            break Termination::GradientTolerance;
        }
        if iterations >= opts.max_iters {
            break Termination::MaxIterations;
        }
        iterations += 1;

        let mut d = -two_loop(&pairs, &pg);
        for i in 0..d.len() {
            if pg[i] == 0.0 {
                d[i] = 0.0;
            }
        }
        if g.dot(&d) >= 0.0 {
            d = -pg.clone();
            pairs.clear();
        }
        let mut t: f64 = if pairs.is_empty() {
            (1.0 / d.norm()).min(1.0)
        } else {
            1.0
        };
        t = t.min(opts.max_step / d.amax());

        let mut accepted = None;
        for _ in 0..60 {
            let mut trial = &x + &d * t;
            if let Some(b) = &bounds {
                b.project(&mut trial);
            }
            let step = &trial - &x;
            let decrease = g.dot(&step);
            let (ft, gt) = match f(&trial) {
                Ok(v) => v,
                // overshooting into overflow or an unsolvable state counts as a failed trial
                Err(Error::NonFinite(_) | Error::SolverBreakdown(_)) => (f64::INFINITY, g.clone()),
                Err(e) => return Err(e),
            };
            if ft.is_finite() && ft <= fx + 1e-4 * decrease && decrease < 0.0 {
                accepted = Some((trial, ft, gt));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            break Termination::LineSearchFailed;
        };

        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let rel = (fx - fnew).abs() / fx.abs().max(fnew.abs()).max(f64::MIN_POSITIVE);
        x = xn;
        fx = fnew;
        g = gn;
        pg = pgrad(&x, &g);
        history.push(fx);
        if rel <= opts.ftol {
            break Termination::Stagnation;
        }
    };

    Ok(Minimum {
        grad_norm: pg.norm(),
        x,
        value: fx,
        iterations,
        history,
        termination,
    })
}

fn two_loop(pairs: &VecDeque<(DVector<f64>, DVector<f64>, f64)>, g: &DVector<f64>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    q
}
