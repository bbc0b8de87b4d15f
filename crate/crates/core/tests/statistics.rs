mod common;

use nalgebra::{DMatrix, DVector};
use pickle_core::ensemble::{build_u_ckle, build_u_model, EnsembleConfig};
use pickle_core::experiment::median_iqr;
use pickle_core::fieldgen::{sample_observations, ReferenceSampler};
use pickle_core::gpr::{self, FitOptions, GaussianFieldModel};
use pickle_core::{decompose, fit_hyperparameters, Grid, KernelFamily, KernelSpec, ResidualOperator, Truncation};

fn fitted(kernel: &KernelSpec, seed: u64) -> KernelSpec {
    let grid = Grid::new(32, 32).unwrap();
    let field = ReferenceSampler::new(kernel, &grid).unwrap().draw(seed);
    let obs = sample_observations(&field, &grid, 50, seed + 1000).unwrap();
    fit_hyperparameters(kernel.family, &obs, &FitOptions { seed, ..Default::default() }).unwrap()
}

#[test]
fn refit_recovers_correlation_length() {
    let truth = KernelSpec::new(KernelFamily::Gaussian, 1.0, 0.5).unwrap();
    let lengths: Vec<f64> = (0..10).map(|s| fitted(&truth, s).length).collect();
    let (median, _) = median_iqr(&lengths);
    assert!((median - 0.5).abs() <= 0.25, "median length {median}, all {lengths:?}");
}

#[test]
fn refit_tracks_standard_deviation() {
    let one = KernelSpec::new(KernelFamily::Matern52, 1.0, 0.3).unwrap();
    let two = KernelSpec::new(KernelFamily::Matern52, 2.0, 0.3).unwrap();
    let ratios: Vec<f64> = (0..10).map(|s| fitted(&two, s).sigma / fitted(&one, s).sigma).collect();
    let (median, _) = median_iqr(&ratios);
    assert!(median > 1.3 && median < 3.0, "median ratio {median}, all {ratios:?}");
}

#[test]
fn reference_draws_have_the_kernel_covariance() {
    let grid = Grid::new(8, 8).unwrap();
    let kernel = KernelSpec::new(KernelFamily::Matern32, 1.5, 0.25).unwrap();
    let sampler = ReferenceSampler::new(&kernel, &grid).unwrap();
    let n = 10_000;
    let draws: Vec<DVector<f64>> = (0..n).map(|s| sampler.draw(s)).collect();
    let (a, b) = (0, 9);
    let var_a = draws.iter().map(|d| d[a] * d[a]).sum::<f64>() / n as f64;
    let cov_ab = draws.iter().map(|d| d[a] * d[b]).sum::<f64>() / n as f64;
    let expected = kernel.eval(grid.center(a).distance(&grid.center(b))).unwrap();
    // 4 standard errors for products of unit-scale Gaussians
    let se = 4.0 * 2.25 * (2.0 / n as f64).sqrt();
    assert!((var_a - 2.25).abs() < se, "{var_a}");
    assert!((cov_ab - expected).abs() < se, "{cov_ab} vs {expected}");
}

fn y_expansion(grid: &Grid, n_xi: usize) -> pickle_core::Ckle {
    let kernel = KernelSpec::new(KernelFamily::Matern52, 1.0, 0.3).unwrap();
    let prior = GaussianFieldModel::from_kernel(grid, &kernel);
    let field = ReferenceSampler::new(&kernel, grid).unwrap().draw(5);
    let obs = sample_observations(&field, grid, 4, 6).unwrap();
    decompose(&gpr::condition(&prior, &obs).unwrap(), Truncation::terms(n_xi)).unwrap()
}

#[test]
fn conditioned_ensemble_matches_dense_oracle() {
    let grid = Grid::new(8, 8).unwrap();
    let n = grid.len();
    let op = ResidualOperator::new(&grid);
    let y = y_expansion(&grid, 20);
    let cfg = EnsembleConfig {
        n_ens: 50,
        seed: 9,
        workers: 2,
    };
    let model = build_u_model(&y, &op, &cfg).unwrap();

    // raw ensemble statistics from the same draws
    let members: Vec<DVector<f64>> = y.sample(cfg.seed, cfg.n_ens).iter().map(|f| op.solve(f).unwrap()).collect();
    let mean = members.iter().fold(DVector::zeros(n), |a, m| a + m) / cfg.n_ens as f64;
    let mut cov = DMatrix::zeros(n, n);
    for m in &members {
        let d = m - &mean;
        cov += &d * d.transpose();
    }
    cov /= (cfg.n_ens - 1) as f64;
    assert!((model.mean() - &mean).amax() < 1e-12);
    assert!((model.cov() - &cov).amax() < 1e-12);

    // explicit-inverse conditioning on five noiseless observations
    let cells = [2, 17, 30, 45, 60];
    let truth = op.solve(&y.mean().map(|v| v + 0.1)).unwrap();
    let obs = common::observe(&grid, &truth, &cells);
    let cx = DMatrix::from_fn(n, 5, |i, j| cov[(i, cells[j])]);
    let cs = DMatrix::from_fn(5, 5, |i, j| cov[(cells[i], cells[j])]);
    let cs_inv = cs.try_inverse().unwrap();
    let resid = DVector::from_fn(5, |i, _| truth[cells[i]] - mean[cells[i]]);
    let cond_mean = &mean + &cx * &cs_inv * resid;
    let cond_cov = &cov - &cx * &cs_inv * cx.transpose();

    let u = build_u_ckle(&model, &obs, n).unwrap();
    let scale = cov.amax();
    assert!((u.mean() - &cond_mean).amax() <= 1e-6 * truth.amax(), "mean {:e}", (u.mean() - &cond_mean).amax());
    let rebuilt = u.modes() * u.modes().transpose();
    assert!((rebuilt - &cond_cov).amax() <= 1e-6 * scale, "cov");
}

#[test]
fn ensemble_mean_settles_with_size() {
    let grid = Grid::new(16, 16).unwrap();
    let op = ResidualOperator::new(&grid);
    let y = y_expansion(&grid, 40);
    let big = EnsembleConfig {
        n_ens: 5000,
        seed: 3,
        workers: 2,
    };
    let half = EnsembleConfig { n_ens: 2500, ..big.clone() };
    // members are indexed streams, so the smaller ensemble is a prefix of the larger
    let m5 = build_u_model(&y, &op, &big).unwrap();
    let m2 = build_u_model(&y, &op, &half).unwrap();
    for c in 0..grid.len() {
        let se = (m2.cov()[(c, c)] / 2500.0).sqrt();
        let d = (m5.mean()[c] - m2.mean()[c]).abs();
        assert!(d <= 3.0 * se + 1e-14, "cell {c}: {d:e} vs {se:e}");
    }
}
