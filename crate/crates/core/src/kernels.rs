//! Stationary isotropic covariance kernels.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Point;

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

/// Relative diagonal jitter (times sigma^2) used before factorizing kernel matrices.
pub const DEFAULT_JITTER: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian,
    Matern52,
    Matern32,
    Exponential,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 4] = [
        KernelFamily::Gaussian,
        KernelFamily::Matern52,
        KernelFamily::Matern32,
        KernelFamily::Exponential,
    ];

    /// Correlation at scaled lag `s = r / length`.
    fn correlation(self, s: f64) -> f64 {
        match self {
            KernelFamily::Gaussian => (-0.5 * s * s).exp(),
            KernelFamily::Matern52 => {
                (1.0 + SQRT5 * s + 5.0 * s * s / 3.0) * (-SQRT5 * s).exp()
            }
            KernelFamily::Matern32 => (1.0 + SQRT3 * s) * (-SQRT3 * s).exp(),
            KernelFamily::Exponential => (-s).exp(),
        }
    }

    /// d correlation / d ln(length) at scaled lag `s`.
    fn correlation_dlog_length(self, s: f64) -> f64 {
        match self {
            KernelFamily::Gaussian => s * s * (-0.5 * s * s).exp(),
            KernelFamily::Matern52 => {
                5.0 / 3.0 * s * s * (1.0 + SQRT5 * s) * (-SQRT5 * s).exp()
            }
            KernelFamily::Matern32 => 3.0 * s * s * (-SQRT3 * s).exp(),
            KernelFamily::Exponential => s * (-s).exp(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub sigma: f64,
    pub length: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, sigma: f64, length: f64) -> Result<Self> {
        let spec = Self {
            family,
            sigma,
            length,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma > 0.0 && self.length > 0.0 && self.sigma.is_finite() && self.length.is_finite()
        {
            Ok(())
        } else {
            Err(Error::InvalidKernel {
                sigma: self.sigma,
                length: self.length,
            })
        }
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }

    pub fn eval(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(Error::NegativeDistance(r));
        }
        Ok(self.eval_unchecked(r))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, r: f64) -> f64 {
        self.variance() * self.family.correlation(r / self.length)
    }

    /// Derivative of the covariance at lag `r` with respect to `ln(length)`.
    pub(crate) fn dlog_length(&self, r: f64) -> f64 {
        self.variance() * self.family.correlation_dlog_length(r / self.length)
    }

    /// Entry `(i, j)` is `k(|a_i - b_j|)`.
    pub fn covariance_matrix(&self, a: &[Point], b: &[Point]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval_unchecked(a[i].distance(&b[j])))
    }

    /// Symmetric covariance of a point set with itself.
    pub fn covariance(&self, points: &[Point]) -> DMatrix<f64> {
        let n = points.len();
        let mut c = DMatrix::zeros(n, n);
        for j in 0..n {
            c[(j, j)] = self.variance();
            for i in (j + 1)..n {
                let v = self.eval_unchecked(points[i].distance(&points[j]));
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        c
    }

    pub fn default_jitter(&self) -> f64 {
        DEFAULT_JITTER * self.variance()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(family: KernelFamily) -> KernelSpec {
        KernelSpec::new(family, 1.0, 0.2).unwrap()
    }

    #[test]
    fn variance_at_zero_lag() {
        for f in KernelFamily::ALL {
            assert_eq!(spec(f).eval(0.0).unwrap(), 1.0);
        }
        let k = KernelSpec::new(KernelFamily::Matern32, 2.5, 0.3).unwrap();
        assert_eq!(k.eval(0.0).unwrap(), 6.25);
    }

    #[test]
    fn decays_to_zero() {
        for f in KernelFamily::ALL {
            assert!(spec(f).eval(10.0).unwrap().abs() < 1e-12, "{f:?}");
        }
    }

    #[test]
    fn matern52_at_one_length() {
        // (1 + sqrt5 + 5/3) e^{-sqrt5}, evaluated with mpmath at 30 digits
        let expected = 0.523_994_108_831_820_3;
        let got = spec(KernelFamily::Matern52).eval(0.2).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got}");
    }

    #[test]
    fn closed_forms() {
        let r = 0.13;
        let s: f64 = r / 0.2;
        let g = spec(KernelFamily::Gaussian).eval(r).unwrap();
        assert!((g - (-s * s / 2.0).exp()).abs() < 1e-15);
        let e = spec(KernelFamily::Exponential).eval(r).unwrap();
        assert!((e - (-s).exp()).abs() < 1e-15);
        let m = spec(KernelFamily::Matern32).eval(r).unwrap();
        let t = 3f64.sqrt() * s;
        assert!((m - (1.0 + t) * (-t).exp()).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            spec(KernelFamily::Gaussian).eval(-1e-3),
            Err(Error::NegativeDistance(_))
        ));
        assert!(KernelSpec::new(KernelFamily::Gaussian, 0.0, 1.0).is_err());
        assert!(KernelSpec::new(KernelFamily::Gaussian, 1.0, -1.0).is_err());
    }

    #[test]
    fn matrix_examples() {
        let k = KernelSpec::new(KernelFamily::Matern32, 1.5, 0.4).unwrap();
        let p = [Point::new(0.3, 0.3)];
        let c = k.covariance_matrix(&p, &p);
        assert_eq!(c.shape(), (1, 1));
        assert_eq!(c[(0, 0)], 2.25);

        let pts = [Point::new(0.1, 0.2), Point::new(0.7, 0.4), Point::new(0.5, 0.9)];
        let c = k.covariance_matrix(&pts, &pts);
        for i in 0..3 {
            assert_eq!(c[(i, i)], 2.25);
            for j in 0..3 {
                let d = ((pts[i].x1 - pts[j].x1).powi(2) + (pts[i].x2 - pts[j].x2).powi(2)).sqrt();
                assert_eq!(c[(i, j)], k.eval(d).unwrap());
                assert_eq!(c[(i, j)], c[(j, i)]);
            }
        }
        assert_eq!(k.covariance(&pts), c);
    }

    #[test]
    fn log_length_derivative_matches_finite_differences() {
        for f in KernelFamily::ALL {
            let k = KernelSpec::new(f, 1.3, 0.25).unwrap();
            for r in [0.0, 0.05, 0.2, 0.6] {
                let h: f64 = 1e-6;
                let kp = KernelSpec { length: 0.25 * h.exp(), ..k };
                let km = KernelSpec { length: 0.25 * (-h).exp(), ..k };
                let fd = (kp.eval(r).unwrap() - km.eval(r).unwrap()) / (2.0 * h);
                assert!((fd - k.dlog_length(r)).abs() < 1e-8, "{f:?} r={r}");
            }
        }
    }

    proptest! {
        #[test]
        fn psd_and_symmetric(
            pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..120),
            fam in 0usize..4,
            length in 0.05f64..1.0,
        ) {
            let pts: Vec<Point> = pts.into_iter().map(|(a, b)| Point::new(a, b)).collect();
            let k = KernelSpec::new(KernelFamily::ALL[fam], 1.0, length).unwrap();
            let c = k.covariance_matrix(&pts, &pts);
            prop_assert_eq!(&c, &c.transpose());
            let min = c.symmetric_eigenvalues().min();
            prop_assert!(min >= -1e-8, "min eigenvalue {}", min);
        }

        #[test]
        fn monotone_decay(fam in 0usize..4, r in 0.0f64..2.0, dr in 0.0f64..0.5) {
            let k = KernelSpec::new(KernelFamily::ALL[fam], 1.0, 0.2).unwrap();
            prop_assert!(k.eval(r + dr).unwrap() <= k.eval(r).unwrap());
        }
    }
}
