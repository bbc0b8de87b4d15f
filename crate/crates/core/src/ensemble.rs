//! Monte Carlo model of the state `u`: push cKLE realizations of `y` through
//! the forward solver, estimate the mean and covariance of `u`, then condition
//! on `u` observations.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fv::ResidualOperator;
use crate::gpr::{self, GaussianFieldModel, ObservationSet};
use crate::kle::{self, Ckle, Truncation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_ens: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_ens: 5000,
            seed: 0,
            workers: 1,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ens < 2 {
            return Err(Error::InvalidArgument(format!("n_ens must be at least 2, got {}", self.n_ens)));
        }
        if self.workers == 0 {
            return Err(Error::InvalidArgument("workers must be positive".into()));
        }
        Ok(())
    }

    /// Rank condition for conditioning the ensemble model on `n_obs` values.
    pub fn check_rank(&self, n_obs: usize) -> Result<()> {
        if self.n_ens <= n_obs {
            return Err(Error::RankDeficientEnsemble {
                n_ens: self.n_ens,
                n_obs,
            });
        }
        Ok(())
    }
}

/// Ensemble mean and unbiased covariance of `u` for `y` drawn from `y_ckle`.
pub fn build_u_model(y_ckle: &Ckle, op: &ResidualOperator, cfg: &EnsembleConfig) -> Result<GaussianFieldModel> {
    build_u_model_with(y_ckle, op, cfg, |f| f.clone())
}

/// As [`build_u_model`], with each realization passed through `to_y` before the
/// forward solve.
pub fn build_u_model_with<F>(ckle: &Ckle, op: &ResidualOperator, cfg: &EnsembleConfig, to_y: F) -> Result<GaussianFieldModel>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    cfg.validate()?;
    if ckle.grid() != op.grid() {
        return Err(Error::InvalidArgument("expansion and residual operator use different grids".into()));
    }
    let n = ckle.grid().len();
    let member = |i: usize| -> Result<DVector<f64>> {
        let xi = ckle.sample_coefficients(cfg.seed, i as u64);
        let y = to_y(&ckle.evaluate(&xi)?);
        op.solve(&y).map_err(|e| Error::EnsembleMember {
            index: i,
            source: Box::new(e),
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let members: Vec<Result<DVector<f64>>> = pool.install(|| (0..cfg.n_ens).into_par_iter().map(member).collect());

    let mut states = DMatrix::zeros(n, cfg.n_ens);
    for (i, u) in members.into_iter().enumerate() {
        states.column_mut(i).copy_from(&u?);
    }
    // shift by the first member so identical members give an exactly zero covariance
    let shift = states.column(0).into_owned();
    for mut col in states.column_iter_mut() {
        col -= &shift;
    }
    let mut offset = DVector::zeros(n);
    for col in states.column_iter() {
        offset += col;
    }
    offset /= cfg.n_ens as f64;
    for mut col in states.column_iter_mut() {
        col -= &offset;
    }
    let mean = shift + offset;
    let mut cov = DMatrix::zeros(n, n);
    cov.gemm(1.0 / (cfg.n_ens - 1) as f64, &states, &states.transpose(), 0.0);
    gpr::symmetrize(&mut cov);
    GaussianFieldModel::new(ckle.grid().clone(), mean, cov)
}

/// Conditions the ensemble model on `u_obs` and keeps at most `n_eta` modes.
///
/// A model with identically zero covariance yields a deterministic expansion.
pub fn build_u_ckle(u_model: &GaussianFieldModel, u_obs: &ObservationSet, n_eta: usize) -> Result<Ckle> {
    if n_eta == 0 {
        return Err(Error::InvalidArgument("n_eta must be positive".into()));
    }
    if u_model.cov().amax() == 0.0 {
        return Ckle::deterministic(u_model.grid(), u_model.mean().clone());
    }
    let conditional = gpr::condition(u_model, u_obs)?;
    kle::decompose(&conditional, Truncation::terms(n_eta)).map_err(|e| match e {
        Error::DegenerateField => Error::VanishingCovariance { n_obs: u_obs.len() },
        other => other,
    })
}
