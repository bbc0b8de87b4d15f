//! Fixtures and finite-difference checks shared by the integration tests and
//! the acceptance harness.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pickle_core::ensemble::{build_u_model_with, EnsembleConfig};
use pickle_core::gpr::{self, GaussianFieldModel, ObservationSet};
use pickle_core::map::MapObjective;
use pickle_core::pickle::Problem;
use pickle_core::{build_u_ckle, decompose, BinaryFieldSpec, Ckle, Grid, KernelFamily, KernelSpec, ParamMap, ResidualOperator, Truncation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, amp: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-amp..amp))
}

pub fn observe(grid: &Grid, field: &DVector<f64>, cells: &[usize]) -> ObservationSet {
    ObservationSet::noiseless(cells.iter().map(|&c| grid.center(c)).collect(), cells.iter().map(|&c| field[c]).collect()).unwrap()
}

/// `max |fd - analytic| / max(|analytic|_inf, floor)` over all entries.
pub fn rel_dev(fd: &DVector<f64>, analytic: &DVector<f64>) -> f64 {
    (fd - analytic).amax() / analytic.amax().max(1e-8)
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut p = x.clone();
        let mut m = x.clone();
        p[i] += h;
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    })
}

/// Central-difference Jacobian, one column per coordinate.
pub fn fd_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            let mut m = x.clone();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect();
    DMatrix::from_columns(&cols)
}

/// Expansions of a conditioned parameter field and of the matching state.
pub struct Expansions {
    pub grid: Grid,
    pub op: ResidualOperator,
    pub y: Ckle,
    pub u: Ckle,
}

pub fn expansions(n: usize, n_xi: usize, n_eta: usize, map: ParamMap, seed: u64) -> Expansions {
    let grid = Grid::new(n, n).unwrap();
    let op = ResidualOperator::new(&grid);
    let kernel = KernelSpec::new(KernelFamily::Matern52, 1.0, 0.3).unwrap();
    let prior = GaussianFieldModel::from_kernel(&grid, &kernel);
    let mut r = rng(seed);
    let field = uniform(&mut r, grid.len(), 0.5);
    let y_obs = observe(&grid, &field, &[0, grid.len() / 2 + 1]);
    let y = decompose(&gpr::condition(&prior, &y_obs).unwrap(), Truncation::terms(n_xi)).unwrap();
    let cfg = EnsembleConfig {
        n_ens: 200,
        seed,
        workers: 1,
    };
    let model = build_u_model_with(&y, &op, &cfg, |v| map.apply(v)).unwrap();
    let u_true = op.solve(&map.apply(y.mean())).unwrap();
    let u = build_u_ckle(&model, &observe(&grid, &u_true, &[3, grid.len() - 2]), n_eta).unwrap();
    Expansions { grid, op, y, u }
}

/// Worst relative deviation between analytic derivatives and central
/// differences over `trials` random points, for each derivative in the
/// inversion stack on an `n x n` grid.
pub fn gradient_deviations(n: usize, trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut worst = vec![
        ("fv dr/du", 0.0f64),
        ("fv dr/dy", 0.0),
        ("pickle objective", 0.0),
        ("map objective", 0.0),
        ("latent chain", 0.0),
    ];
    let grid = Grid::new(n, n).unwrap();
    let op = ResidualOperator::new(&grid);
    let plain = expansions(n, 6, 6, ParamMap::Identity, seed);
    let spec = BinaryFieldSpec::default();
    let latent = expansions(n, 6, 6, ParamMap::Logistic(spec), seed + 1);
    let mut r = rng(seed);
    let h = 1e-6;
    for _ in 0..trials {
        let u = uniform(&mut r, grid.len(), 1.0);
        let y = uniform(&mut r, grid.len(), 1.0);
        let (du, dy) = op.residual_jacobians(&u, &y).unwrap();
        let fd_u = fd_jacobian(|x| op.residual(x, &y).unwrap(), &u, h);
        let fd_y = fd_jacobian(|x| op.residual(&u, x).unwrap(), &y, h);
        worst[0].1 = worst[0].1.max((&fd_u - du.to_dense()).amax() / du.to_dense().amax());
        worst[1].1 = worst[1].1.max((&fd_y - dy.to_dense()).amax() / dy.to_dense().amax());

        for (slot, e, map) in [(2, &plain, ParamMap::Identity), (4, &latent, ParamMap::Logistic(spec))] {
            let p = Problem::new(&e.y, &e.u, &e.op, map, 1e-3).unwrap();
            let x = uniform(&mut r, p.dim(), 1.0);
            let (_, g) = p.value_and_gradient(&x).unwrap();
            let fd = fd_gradient(|x| p.value(x).unwrap(), &x, h);
            worst[slot].1 = worst[slot].1.max(rel_dev(&fd, &g));
        }

        let truth = uniform(&mut r, grid.len(), 1.0);
        let u_truth = op.solve(&truth).unwrap();
        let cells: Vec<usize> = (0..grid.len()).step_by(3).collect();
        let obj = MapObjective::new(&observe(&grid, &truth, &cells[..cells.len() / 2]), &observe(&grid, &u_truth, &cells), &op, 0.05).unwrap();
        let y0 = uniform(&mut r, grid.len(), 1.0);
        let (_, g) = obj.value_and_gradient(&y0).unwrap();
        let fd = fd_gradient(|x| obj.value(x).unwrap(), &y0, h);
        worst[3].1 = worst[3].1.max(rel_dev(&fd, &g));
    }
    worst
}

/// PICKLE on data generated from a field inside the span of the parameter
/// expansion, with the state observed exactly at four cells out of five.
/// Returns the relative l2 error of the recovered field.
pub fn inverse_crime(seed: u64) -> f64 {
    let grid = Grid::new(16, 16).unwrap();
    let op = ResidualOperator::new(&grid);
    let kernel = KernelSpec::new(KernelFamily::Matern52, 1.0, 0.3).unwrap();
    let prior = GaussianFieldModel::from_kernel(&grid, &kernel);
    let mut r = rng(seed);
    let anchor = uniform(&mut r, grid.len(), 0.5);
    let y_cells: Vec<usize> = (0..grid.len()).step_by(41).collect();
    let y_ckle = decompose(&gpr::condition(&prior, &observe(&grid, &anchor, &y_cells)).unwrap(), Truncation::terms(12)).unwrap();
    // a draw of the expansion itself, so exactly representable
    let y_ref = y_ckle.sample(seed + 100, 1).remove(0);
    let u_ref = op.solve(&y_ref).unwrap();
    let ens = EnsembleConfig {
        n_ens: 2000,
        seed,
        workers: 1,
    };
    let model = pickle_core::build_u_model(&y_ckle, &op, &ens).unwrap();
    let u_cells: Vec<usize> = (0..grid.len()).filter(|c| c % 5 != 0).collect();
    let u_ckle = build_u_ckle(&model, &observe(&grid, &u_ref, &u_cells), grid.len()).unwrap();
    let cfg = pickle_core::InversionConfig {
        n_xi: y_ckle.terms(),
        n_eta: u_ckle.terms(),
        ..Default::default()
    };
    let res = pickle_core::invert(&y_ckle, &u_ckle, &op, &cfg).unwrap();
    pickle_core::relative_lp_error(y_ref.as_slice(), &res.y_est, 2).unwrap()
}
