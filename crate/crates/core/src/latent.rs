//! Two-facies log-diffusion fields represented through a smooth latent field:
//! `y = (y1 - y2) expit(f / epsilon) + y2`.
//!
//! The latent field is conditioned on facies labels with a Laplace-approximated
//! logistic GP classifier.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::{self, EnsembleConfig};
use crate::error::{Error, Result};
use crate::fv::ResidualOperator;
use crate::gpr::{self, GaussianFieldModel, ObservationSet};
use crate::grid::Grid;
use crate::kernels::KernelSpec;
use crate::kle::{self, Ckle, Truncation};
use crate::pickle::{self, InversionConfig, InversionResult, ParamMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryFieldSpec {
    pub y1: f64,
    pub y2: f64,
    pub epsilon: f64,
}

impl Default for BinaryFieldSpec {
    /// Facies contrast of 10 and inversion sharpness 30.
    fn default() -> Self {
        Self {
            y1: 0.0,
            y2: -(10f64.ln()),
            epsilon: 1.0 / 30.0,
        }
    }
}

/// Overflow-safe logistic function.
pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl BinaryFieldSpec {
    pub fn new(y1: f64, y2: f64, epsilon: f64) -> Result<Self> {
        let s = Self { y1, y2, epsilon };
        s.validate()?;
        Ok(s)
    }

    pub fn with_epsilon(self, epsilon: f64) -> Self {
        Self { epsilon, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.y1 > self.y2) || !self.y1.is_finite() || !self.y2.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "facies values need y1 > y2, got y1 = {}, y2 = {}",
                self.y1, self.y2
            )));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn latent_to_y(&self, f: &DVector<f64>) -> DVector<f64> {
        f.map(|v| (self.y1 - self.y2) * expit(v / self.epsilon) + self.y2)
    }

    /// Entrywise `dy/df`.
    pub fn dy_df(&self, f: &DVector<f64>) -> DVector<f64> {
        f.map(|v| {
            let s = expit(v / self.epsilon);
            (self.y1 - self.y2) * s * (1.0 - s) / self.epsilon
        })
    }

    /// Label 1 for `y1`, 0 for `y2`, within `1e-6`.
    pub fn label(&self, index: usize, value: f64) -> Result<f64> {
        if (value - self.y1).abs() <= 1e-6 {
            Ok(1.0)
        } else if (value - self.y2).abs() <= 1e-6 {
            Ok(0.0)
        } else {
            Err(Error::NonBinaryObservation { index, value })
        }
    }
}

/// Laplace approximation to the latent GP posterior under a Bernoulli-logistic
/// likelihood for the facies labels, evaluated on the grid.
pub fn classify_latent(y_obs: &ObservationSet, spec: &BinaryFieldSpec, kernel: &KernelSpec, grid: &Grid) -> Result<GaussianFieldModel> {
    spec.validate()?;
    kernel.validate()?;
    let prior = GaussianFieldModel::from_kernel(grid, kernel);
    if y_obs.is_empty() {
        return Ok(prior);
    }
    let labels = DVector::from_iterator(
        y_obs.len(),
        y_obs
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| spec.label(i, v))
            .collect::<Result<Vec<_>>>()?,
    );
    let x = y_obs.locations();
    let mut k = kernel.covariance(x);
    for i in 0..x.len() {
        k[(i, i)] += kernel.default_jitter();
    }
    let mode = laplace_mode(&k, &labels)?;

    let pi = mode.f.map(expit);
    let grad = &labels - &pi;
    let w_sqrt = pi.map(|p| (p * (1.0 - p)).sqrt());
    let k_star = kernel.covariance_matrix(x, grid.centers());
    let mean = k_star.tr_mul(&grad);
    let mut scaled = k_star;
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= w_sqrt[i];
    }
    let v = mode
        .b_factor
        .l()
        .solve_lower_triangular(&scaled)
        .ok_or(Error::FactorizationFailed { jitter: 0.0 })?;
    let (grid, _, mut cov) = prior.into_parts();
    cov.gemm_tr(-1.0, &v, &v, 1.0);
    gpr::symmetrize(&mut cov);
    GaussianFieldModel::new(grid, mean, cov)
}

struct LaplaceMode {
    f: DVector<f64>,
    b_factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

/// Newton iterations for the posterior mode with `B = I + W^1/2 K W^1/2`.
fn laplace_mode(k: &DMatrix<f64>, labels: &DVector<f64>) -> Result<LaplaceMode> {
    let n = labels.len();
    let mut f = DVector::zeros(n);
    let mut a = DVector::zeros(n);
    let mut previous = f64::NEG_INFINITY;
    for _ in 0..100 {
        let pi = f.map(expit);
        let w = pi.map(|p| p * (1.0 - p));
        let ws = w.map(f64::sqrt);
        let mut b = DMatrix::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                b[(i, j)] += ws[i] * k[(i, j)] * ws[j];
            }
        }
        let ch = b.cholesky().ok_or(Error::FactorizationFailed { jitter: 0.0 })?;
        let rhs = w.component_mul(&f) + (labels - &pi);
        let kb = k * &rhs;
        let t = ch.solve(&ws.component_mul(&kb));
        let a_new = &rhs - ws.component_mul(&t);
        let f_new = k * &a_new;

        // damp the step if the log posterior does not increase
        let objective = |a: &DVector<f64>, f: &DVector<f64>| -> f64 {
            -0.5 * a.dot(f) + f.iter().zip(labels.iter()).map(|(&fi, &bi)| log_likelihood(fi, bi)).sum::<f64>()
        };
        let mut step = 1.0;
        let mut candidate = (a_new.clone(), f_new.clone());
        let base = objective(&a, &f);
        while objective(&candidate.0, &candidate.1) < base && step > 1e-6 {
            step *= 0.5;
            candidate = (&a + (&a_new - &a) * step, &f + (&f_new - &f) * step);
        }
        a = candidate.0;
        f = candidate.1;
        let current = objective(&a, &f);
        if (current - previous).abs() <= 1e-12 * current.abs().max(1.0) {
            let pi = f.map(expit);
            let ws = pi.map(|p| (p * (1.0 - p)).sqrt());
            let mut b = DMatrix::identity(n, n);
            for i in 0..n {
                for j in 0..n {
                    b[(i, j)] += ws[i] * k[(i, j)] * ws[j];
                }
            }
            let b_factor = b.cholesky().ok_or(Error::FactorizationFailed { jitter: 0.0 })?;
            return Ok(LaplaceMode { f, b_factor });
        }
        previous = current;
    }
    Err(Error::NotConverged {
        message: "Laplace mode iteration".into(),
        best: f.as_slice().to_vec(),
        best_value: previous,
        grad_norm: f64::NAN,
    })
}

/// `log p(b | f)` for the logistic likelihood.
fn log_likelihood(f: f64, b: f64) -> f64 {
    let s = if b > 0.5 { f } else { -f };
    // -log(1 + exp(-s))
    -((-s.abs()).exp().ln_1p() + (-s).max(0.0))
}

/// Builds the latent expansion, the state ensemble through the logistic map,
/// and inverts for latent and state coefficients.
pub fn invert_binary(
    latent_model: &GaussianFieldModel,
    spec: &BinaryFieldSpec,
    u_obs: &ObservationSet,
    op: &ResidualOperator,
    cfg: &InversionConfig,
    ens_cfg: &EnsembleConfig,
) -> Result<InversionResult> {
    spec.validate()?;
    cfg.validate()?;
    ens_cfg.check_rank(u_obs.len())?;
    let f_ckle = match kle::decompose(latent_model, Truncation::terms(cfg.n_xi)) {
        Ok(c) => c,
        Err(Error::DegenerateField) => Ckle::deterministic(latent_model.grid(), latent_model.mean().clone())?,
        Err(e) => return Err(e),
    };
    let u_model = ensemble::build_u_model_with(&f_ckle, op, ens_cfg, |f| spec.latent_to_y(f))?;
    let u_ckle = ensemble::build_u_ckle(&u_model, u_obs, cfg.n_eta)?;
    pickle::invert_mapped(&f_ckle, &u_ckle, op, ParamMap::Logistic(*spec), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Point;
    use crate::kernels::KernelFamily;
    use crate::optim::{lbfgs, LbfgsOptions};
    use crate::pickle::Problem;

    fn spec() -> BinaryFieldSpec {
        BinaryFieldSpec::default()
    }

    #[test]
    fn latent_map_examples() {
        let s = spec();
        let y = s.latent_to_y(&DVector::from_element(3, 0.0));
        assert!(y.iter().all(|&v| (v - 0.5 * (s.y1 + s.y2)).abs() < 1e-15));

        let sharp = s.with_epsilon(1e-6);
        let y = sharp.latent_to_y(&DVector::from_element(1, 1.0));
        assert!((y[0] - s.y1).abs() < 1e-9);

        let logit = (0.25f64 / 0.75).ln();
        let y = s.latent_to_y(&DVector::from_element(1, s.epsilon * logit));
        assert!((y[0] - (0.25 * s.y1 + 0.75 * s.y2)).abs() < 1e-12);
    }

    #[test]
    fn latent_map_range_and_monotonicity() {
        let s = spec();
        let f = DVector::from_fn(401, |i, _| -2.0 + i as f64 * 0.01);
        let y = s.latent_to_y(&f);
        assert!(y.iter().all(|&v| v >= s.y2 - 1e-12 && v <= s.y1 + 1e-12));
        let moderate = s.latent_to_y(&DVector::from_fn(101, |i, _| -0.5 + i as f64 * 0.01));
        assert!(moderate.iter().all(|&v| v > s.y2 && v < s.y1));
        assert!(moderate.as_slice().windows(2).all(|w| w[1] > w[0]));
        let extreme = s.latent_to_y(&DVector::from_vec(vec![-1e308, 1e308]));
        assert!(extreme.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let s = spec();
        let f = DVector::from_vec(vec![-0.1, -0.02, 0.0, 0.013, 0.2]);
        let d = s.dy_df(&f);
        let h = 1e-7;
        for i in 0..5 {
            let fd = (s.latent_to_y(&f.add_scalar(h))[i] - s.latent_to_y(&f.add_scalar(-h))[i]) / (2.0 * h);
            assert!((fd - d[i]).abs() <= 1e-6 * d[i].abs().max(1e-3));
        }
    }

    #[test]
    fn labels_and_rejection() {
        let s = spec();
        assert_eq!(s.label(0, 0.0).unwrap(), 1.0);
        assert_eq!(s.label(0, s.y2).unwrap(), 0.0);
        assert!(matches!(s.label(3, -1.0), Err(Error::NonBinaryObservation { index: 3, .. })));
        assert!(BinaryFieldSpec::new(0.0, 1.0, 0.1).is_err());
        assert!(BinaryFieldSpec::new(1.0, 0.0, 0.0).is_err());
    }

    fn kernel() -> KernelSpec {
        KernelSpec::new(KernelFamily::Matern52, 1.0, 0.2).unwrap()
    }

    #[test]
    fn single_label_sign() {
        let g = Grid::new(8, 8).unwrap();
        let s = spec();
        let obs = ObservationSet::noiseless(vec![g.center(20)], vec![s.y1]).unwrap();
        let m = classify_latent(&obs, &s, &kernel(), &g).unwrap();
        assert!(m.mean()[20] > 0.0);
        assert!(m.variance()[20] < kernel().variance());
    }

    fn five_points(g: &Grid, s: &BinaryFieldSpec, flip: bool) -> ObservationSet {
        let cells = [3, 17, 30, 44, 58];
        let labels = [true, true, false, true, false];
        ObservationSet::noiseless(
            cells.iter().map(|&c| g.center(c)).collect(),
            labels.iter().map(|&l| if l ^ flip { s.y1 } else { s.y2 }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn flipped_labels_negate_mean() {
        let g = Grid::new(8, 8).unwrap();
        let s = spec();
        let a = classify_latent(&five_points(&g, &s, false), &s, &kernel(), &g).unwrap();
        let b = classify_latent(&five_points(&g, &s, true), &s, &kernel(), &g).unwrap();
        assert!((a.mean() + b.mean()).amax() < 1e-8);
        assert!((a.cov() - b.cov()).amax() < 1e-8);
    }

    #[test]
    fn laplace_mode_matches_direct_maximization() {
        let g = Grid::new(8, 8).unwrap();
        let s = spec();
        let obs = five_points(&g, &s, false);
        let k = kernel();
        let m = classify_latent(&obs, &s, &k, &g).unwrap();

        // maximize log p(b | f) - f^T K^-1 f / 2 over the five latent values
        let mut kk = k.covariance(obs.locations());
        for i in 0..5 {
            kk[(i, i)] += k.default_jitter();
        }
        let kinv = kk.clone().try_inverse().unwrap();
        let labels: Vec<f64> = obs.values().iter().map(|&v| if v == s.y1 { 1.0 } else { 0.0 }).collect();
        let neg_post = |f: &DVector<f64>| {
            let kf = &kinv * f;
            let mut v = 0.5 * f.dot(&kf);
            let mut g = kf;
            for i in 0..5 {
                v -= log_likelihood(f[i], labels[i]);
                g[i] -= labels[i] - expit(f[i]);
            }
            Ok((v, g))
        };
        let opts = LbfgsOptions {
            grad_tol: 1e-12,
            ftol: 0.0,
            max_iters: 5000,
            ..Default::default()
        };
        let best = lbfgs(neg_post, DVector::zeros(5), None, &opts).unwrap();
        // the posterior mean at observed cells equals the mode there
        let cells = obs.cells(&g).unwrap();
        for (i, &c) in cells.iter().enumerate() {
            assert!((m.mean()[c] - best.x[i]).abs() < 1e-4, "{} vs {}", m.mean()[c], best.x[i]);
        }
    }

    #[test]
    fn label_consistency() {
        let g = Grid::new(16, 16).unwrap();
        let s = spec();
        let k = kernel();
        let pts: Vec<Point> = (0..25).map(|i| g.center((i * 37 + 5) % 256)).collect();
        let vals: Vec<f64> = pts
            .iter()
            .map(|p| if (p.x1 - 0.5).powi(2) + (p.x2 - 0.4).powi(2) < 0.09 { s.y1 } else { s.y2 })
            .collect();
        let obs = ObservationSet::noiseless(pts.clone(), vals.clone()).unwrap();
        let m = classify_latent(&obs, &s, &k, &g).unwrap();
        let cells = obs.cells(&g).unwrap();
        let agree = cells
            .iter()
            .zip(&vals)
            .filter(|(&c, &v)| (m.mean()[c] > 0.0) == (v == s.y1))
            .count();
        assert!(agree as f64 >= 0.95 * 25.0);
    }

    #[test]
    fn logistic_chain_gradient() {
        let g = Grid::new(8, 8).unwrap();
        let op = ResidualOperator::new(&g);
        let s = spec();
        let latent = classify_latent(&five_points(&g, &s, false), &s, &kernel(), &g).unwrap();
        let f = kle::decompose(&latent, Truncation::terms(8)).unwrap();
        let ens = EnsembleConfig {
            n_ens: 100,
            seed: 4,
            workers: 1,
        };
        let um = ensemble::build_u_model_with(&f, &op, &ens, |v| s.latent_to_y(v)).unwrap();
        let u = ensemble::build_u_ckle(&um, &ObservationSet::empty(), 6).unwrap();
        let p = Problem::new(&f, &u, &op, ParamMap::Logistic(s), 1e-3).unwrap();
        let x = DVector::from_fn(p.dim(), |i, _| 0.1 * ((i as f64) * 1.1).sin());
        let (_, grad) = p.value_and_gradient(&x).unwrap();
        let h = 1e-6;
        for i in 0..p.dim() {
            let mut e = DVector::zeros(p.dim());
            e[i] = h;
            let fd = (p.value(&(&x + &e)).unwrap() - p.value(&(&x - &e)).unwrap()) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-5 * grad.amax());
        }
    }

    #[test]
    fn degenerate_latent_model() {
        let g = Grid::new(6, 6).unwrap();
        let op = ResidualOperator::new(&g);
        let s = spec();
        let mean = DVector::from_fn(36, |k, _| g.center(k).x1 - 0.5);
        let latent = GaussianFieldModel::new(g.clone(), mean.clone(), DMatrix::zeros(36, 36)).unwrap();
        let cfg = InversionConfig {
            n_xi: 5,
            n_eta: 5,
            ..Default::default()
        };
        let ens = EnsembleConfig {
            n_ens: 4,
            ..Default::default()
        };
        let res = invert_binary(&latent, &s, &ObservationSet::empty(), &op, &cfg, &ens).unwrap();
        assert_eq!(res.y_est.as_slice(), s.latent_to_y(&mean).as_slice());
        assert!(res.xi.is_empty() && res.eta.is_empty());
    }
}
