//! Fixtures for the benchmarks: a 32x32 problem shaped like the experiment rows.

use nalgebra::DVector;
use pickle_core::ensemble::EnsembleConfig;
use pickle_core::fieldgen::{sample_observations, ReferenceSampler};
use pickle_core::gpr::{self, GaussianFieldModel, ObservationSet};
use pickle_core::{build_u_ckle, build_u_model, decompose, Ckle, Grid, KernelFamily, KernelSpec, ResidualOperator, Truncation};

pub struct Fixture {
    pub grid: Grid,
    pub op: ResidualOperator,
    pub y_ref: DVector<f64>,
    pub u_ref: DVector<f64>,
    pub y_obs: ObservationSet,
    pub u_obs: ObservationSet,
    pub y_ckle: Ckle,
    pub u_ckle: Ckle,
}

/// Matern 5/2 reference with 50 + 50 observations; `n_ens` members in the
/// state ensemble and `terms` modes in both expansions.
pub fn fixture(n_ens: usize, terms: usize) -> Fixture {
    let grid = Grid::new(32, 32).unwrap();
    let op = ResidualOperator::new(&grid);
    let kernel = KernelSpec::new(KernelFamily::Matern52, 1.0, 0.2).unwrap();
    let y_ref = ReferenceSampler::new(&kernel, &grid).unwrap().draw(1);
    let u_ref = op.solve(&y_ref).unwrap();
    let y_obs = sample_observations(&y_ref, &grid, 50, 2).unwrap();
    let u_obs = sample_observations(&u_ref, &grid, 50, 3).unwrap();
    let prior = GaussianFieldModel::from_kernel(&grid, &kernel);
    let y_ckle = decompose(&gpr::condition(&prior, &y_obs).unwrap(), Truncation::terms(terms)).unwrap();
    let ens = EnsembleConfig {
        n_ens,
        seed: 4,
        workers: 1,
    };
    let u_ckle = build_u_ckle(&build_u_model(&y_ckle, &op, &ens).unwrap(), &u_obs, terms).unwrap();
    Fixture {
        grid,
        op,
        y_ref,
        u_ref,
        y_obs,
        u_obs,
        y_ckle,
        u_ckle,
    }
}
