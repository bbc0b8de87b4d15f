//! Synthetic reference fields, observation sampling and error metrics.

use nalgebra::DVector;
use rand::seq::index;

use crate::error::{Error, Result};
use crate::gpr::{self, ObservationSet};
use crate::grid::Grid;
use crate::kernels::KernelSpec;
use crate::random;

/// Exact draws from `N(0, C)` on cell centers through a Cholesky factor.
pub struct ReferenceSampler {
    factor: nalgebra::DMatrix<f64>,
}

impl ReferenceSampler {
    pub fn new(kernel: &KernelSpec, grid: &Grid) -> Result<Self> {
        kernel.validate()?;
        let cov = kernel.covariance(grid.centers());
        let (ch, _) = gpr::cholesky_with_jitter(&cov, kernel.variance())?;
        Ok(Self { factor: ch.unpack() })
    }

    pub fn draw(&self, seed: u64) -> DVector<f64> {
        let mut rng = random::stream(seed, 0);
        let z = DVector::from_vec(random::standard_normals(&mut rng, self.factor.nrows()));
        &self.factor * z
    }
}

pub fn generate_reference(kernel: &KernelSpec, grid: &Grid, seed: u64) -> Result<DVector<f64>> {
    Ok(ReferenceSampler::new(kernel, grid)?.draw(seed))
}

/// `count` distinct cells drawn uniformly without replacement, sorted.
pub fn sample_cells(n: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count > n {
        return Err(Error::InvalidArgument(format!("cannot sample {count} of {n} cells")));
    }
    let mut rng = random::stream(seed, 0);
    let mut cells = index::sample(&mut rng, n, count).into_vec();
    cells.sort_unstable();
    Ok(cells)
}

/// Noiseless observations of `field` at randomly chosen cell centers.
pub fn sample_observations(field: &DVector<f64>, grid: &Grid, count: usize, seed: u64) -> Result<ObservationSet> {
    if field.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            what: "field",
            expected: grid.len(),
            found: field.len(),
        });
    }
    let cells = sample_cells(grid.len(), count, seed)?;
    observe(field, grid, &cells)
}

pub fn observe(field: &DVector<f64>, grid: &Grid, cells: &[usize]) -> Result<ObservationSet> {
    ObservationSet::noiseless(
        cells.iter().map(|&c| grid.center(c)).collect(),
        cells.iter().map(|&c| field[c]).collect(),
    )
}

/// `|reference - estimate|_p / |reference|_p` for `p` in {1, 2}.
pub fn relative_lp_error(reference: &[f64], estimate: &[f64], p: u32) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::DimensionMismatch {
            what: "estimate",
            expected: reference.len(),
            found: estimate.len(),
        });
    }
    let norm = |it: &mut dyn Iterator<Item = f64>| -> Result<f64> {
        match p {
            1 => Ok(it.map(f64::abs).sum()),
            2 => Ok(it.map(|v| v * v).sum::<f64>().sqrt()),
            _ => Err(Error::InvalidArgument(format!("unsupported norm order {p}"))),
        }
    };
    let denom = norm(&mut reference.iter().copied())?;
    if denom == 0.0 {
        return Err(Error::ZeroReferenceNorm);
    }
    let num = norm(&mut reference.iter().zip(estimate).map(|(a, b)| a - b))?;
    Ok(num / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;
    use proptest::prelude::*;

    #[test]
    fn reference_is_seed_deterministic() {
        let g = Grid::new(8, 8).unwrap();
        let k = KernelSpec::new(KernelFamily::Gaussian, 1.0, 0.2).unwrap();
        let a = generate_reference(&k, &g, 5).unwrap();
        assert_eq!(a, generate_reference(&k, &g, 5).unwrap());
        assert_ne!(a, generate_reference(&k, &g, 6).unwrap());
    }

    #[test]
    fn observation_sampling() {
        let g = Grid::new(4, 4).unwrap();
        let f = DVector::from_fn(16, |k, _| k as f64);
        let all = sample_observations(&f, &g, 16, 1).unwrap();
        assert_eq!(all.values().as_slice(), f.as_slice());
        let one = sample_observations(&f, &g, 1, 9).unwrap();
        assert_eq!(one, sample_observations(&f, &g, 1, 9).unwrap());
        assert!(sample_observations(&f, &g, 17, 1).is_err());

        let big = Grid::new(32, 32).unwrap();
        for s in 0..10u64 {
            let a = sample_cells(big.len(), 50, 2 * s).unwrap();
            let b = sample_cells(big.len(), 50, 2 * s + 1).unwrap();
            assert_ne!(a, b);
            let mut d = a.clone();
            d.dedup();
            assert_eq!(d.len(), 50);
        }
    }

    #[test]
    fn error_examples() {
        let r = [3.0, 4.0];
        assert_eq!(relative_lp_error(&r, &r, 2).unwrap(), 0.0);
        assert_eq!(relative_lp_error(&r, &[0.0, 0.0], 2).unwrap(), 1.0);
        assert_eq!(relative_lp_error(&r, &[0.0, 0.0], 1).unwrap(), 1.0);
        assert!((relative_lp_error(&r, &[3.0, 0.0], 2).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(relative_lp_error(&[0.0], &[1.0], 2), Err(Error::ZeroReferenceNorm)));
        assert!(relative_lp_error(&r, &r, 3).is_err());
    }

    proptest! {
        #[test]
        fn error_is_scale_invariant(
            v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..30),
            c in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
            p in 1u32..3,
        ) {
            let (r, e): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            prop_assume!(r.iter().any(|x| x.abs() > 1e-3));
            let base = relative_lp_error(&r, &e, p).unwrap();
            let rs: Vec<f64> = r.iter().map(|x| x * c).collect();
            let es: Vec<f64> = e.iter().map(|x| x * c).collect();
            let scaled = relative_lp_error(&rs, &es, p).unwrap();
            prop_assert!((base - scaled).abs() <= 1e-12 * base.max(1.0));
        }

        #[test]
        fn error_triangle(
            v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..30),
            p in 1u32..3,
        ) {
            let r: Vec<f64> = v.iter().map(|t| t.0).collect();
            let a: Vec<f64> = v.iter().map(|t| t.1).collect();
            let b: Vec<f64> = v.iter().map(|t| t.2).collect();
            prop_assume!(r.iter().any(|x| x.abs() > 1e-3));
            let ea = relative_lp_error(&r, &a, p).unwrap();
            let eb = relative_lp_error(&r, &b, p).unwrap();
            let dab = relative_lp_error(&r, &r.iter().zip(a.iter().zip(&b)).map(|(ri, (ai, bi))| ri - (ai - bi)).collect::<Vec<_>>(), p).unwrap();
            prop_assert!(ea <= eb + dab + 1e-12);
        }
    }
}
