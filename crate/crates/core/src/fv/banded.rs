//! Banded Cholesky and Jacobi-preconditioned CG for the SPD finite-volume
//! systems. Row-major cell ordering gives a half-bandwidth of `nx`.

use nalgebra::DVector;

use super::SparseRows;

pub struct BandedCholesky {
    n: usize,
    bw: usize,
    // row i stores L(i, i - bw ..= i)
    l: Vec<f64>,
}

impl BandedCholesky {
    /// Returns `None` on a non-positive pivot.
    pub fn factor(a: &SparseRows, bw: usize) -> Option<Self> {
        let n = a.nrows();
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        for (i, row) in a.rows().iter().enumerate() {
            for &(j, v) in row {
                if j <= i {
                    debug_assert!(i - j <= bw);
                    l[i * w + (j + bw - i)] += v;
                }
            }
        }
        // row-oriented: L(i, j) needs rows i and j over their common band
        for i in 0..n {
            let k0 = i.saturating_sub(bw);
            let ri = i * w + bw - i;
            for j in k0..i {
                let rj = j * w + bw - j;
                let lo = k0.max(j.saturating_sub(bw));
                let dot = dot(&l[ri + lo..ri + j], &l[rj + lo..rj + j]);
                l[ri + j] = (l[ri + j] - dot) / l[rj + j];
            }
            let d = l[ri + i] - dot(&l[ri + k0..ri + i], &l[ri + k0..ri + i]);
            if !(d > 0.0) {
                return None;
            }
            l[ri + i] = d.sqrt();
        }
        Some(Self { n, bw, l })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let mut x = b.clone();
        for i in 0..n {
            let ri = i * w + bw - i;
            let mut s = x[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.l[ri + k] * x[k];
            }
            x[i] = s / self.l[ri + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n.min(i + bw + 1) {
                s -= self.l[k * w + bw - k + i] * x[k];
            }
            x[i] = s / self.l[i * w + bw - i + i];
        }
        x
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradients. Returns the iterate and the final
/// relative residual.
pub fn conjugate_gradient(a: &SparseRows, b: &DVector<f64>, rtol: f64, max_iters: usize) -> (DVector<f64>, f64) {
    let n = b.len();
    let diag = a.diagonal();
    let bnorm = b.norm().max(f64::MIN_POSITIVE);
    let mut x = DVector::zeros(n);
    let mut r = b.clone();
    let mut z = r.component_div(&diag);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for _ in 0..max_iters {
        if r.norm() / bnorm <= rtol {
            break;
        }
        let ap = a.mul_vec(&p);
        let alpha = rz / p.dot(&ap);
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        z = r.component_div(&diag);
        let rz_new = r.dot(&z);
        p = &z + &p * (rz_new / rz);
        rz = rz_new;
    }
    let rel = (b - a.mul_vec(&x)).norm() / bnorm;
    (x, rel)
}
