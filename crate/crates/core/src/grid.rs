//! Uniform cell-centered discretization of the unit square.
//!
//! Cells are indexed row-major: cell `(i, j)` (column `i` along x1, row `j`
//! along x2) has linear index `k = j * nx + i`. Every covariance matrix, mode
//! matrix and finite-volume operator in the crate uses this layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A coordinate in the unit square.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x1: f64,
    pub x2: f64,
}

impl Point {
    pub const fn new(x1: f64, x2: f64) -> Self {
        Self { x1, x2 }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x1 - other.x1).hypot(self.x2 - other.x2)
    }

    pub fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.x1) && (0.0..=1.0).contains(&self.x2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
    centers: Vec<Point>,
}

impl Grid {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::GridTooSmall { nx, ny });
        }
        let hx = 1.0 / nx as f64;
        let hy = 1.0 / ny as f64;
        let centers = (0..ny)
            .flat_map(|j| (0..nx).map(move |i| (i, j)))
            .map(|(i, j)| Point::new((i as f64 + 0.5) * hx, (j as f64 + 0.5) * hy))
            .collect();
        Ok(Self {
            nx,
            ny,
            hx,
            hy,
            centers,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn hx(&self) -> f64 {
        self.hx
    }

    pub fn hy(&self) -> f64 {
        self.hy
    }

    pub fn cell_area(&self) -> f64 {
        self.hx * self.hy
    }

    /// Number of cells.
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[Point] {
        &self.centers
    }

    pub fn center(&self, k: usize) -> Point {
        self.centers[k]
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// `(i, j)` of linear index `k`.
    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    /// Index of the cell whose center is closest to `point`; ties go to the
    /// smallest linear index.
    pub fn nearest_cell(&self, point: Point) -> Result<usize> {
        if !point.in_unit_square() {
            return Err(Error::OutsideDomain {
                x1: point.x1,
                x2: point.x2,
            });
        }
        let mut best = 0;
        let mut best_d2 = f64::INFINITY;
        for (k, c) in self.centers.iter().enumerate() {
            let d2 = (c.x1 - point.x1).powi(2) + (c.x2 - point.x2).powi(2);
            if d2 < best_d2 {
                best_d2 = d2;
                best = k;
            }
        }
        Ok(best)
    }

    pub fn nearest_cells(&self, points: &[Point]) -> Result<Vec<usize>> {
        points.iter().map(|p| self.nearest_cell(*p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn paper_grid_has_1024_cells() {
        let g = Grid::new(32, 32).unwrap();
        assert_eq!(g.len(), 1024);
        assert_eq!(g.hx(), 1.0 / 32.0);
        assert_eq!(g.hy(), 1.0 / 32.0);
    }

    #[test]
    fn two_by_two_centers() {
        let g = Grid::new(2, 2).unwrap();
        let expected = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];
        for (c, e) in g.centers().iter().zip(expected) {
            assert_eq!((c.x1, c.x2), e);
        }
    }

    #[test]
    fn rectangular_center() {
        let g = Grid::new(4, 2).unwrap();
        assert_eq!(g.len(), 8);
        let c = g.center(g.index(3, 1));
        assert_eq!((c.x1, c.x2), (0.875, 0.75));
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(matches!(Grid::new(1, 4), Err(Error::GridTooSmall { .. })));
        assert!(matches!(Grid::new(4, 0), Err(Error::GridTooSmall { .. })));
    }

    #[test]
    fn nearest_cell_examples() {
        let g = Grid::new(2, 2).unwrap();
        assert_eq!(g.nearest_cell(Point::new(0.26, 0.24)).unwrap(), 0);
        assert_eq!(g.nearest_cell(Point::new(0.5, 0.5)).unwrap(), 0);
        let g = Grid::new(32, 32).unwrap();
        assert_eq!(g.nearest_cell(Point::new(1.0, 1.0)).unwrap(), 1023);
        assert!(g.nearest_cell(Point::new(1.01, 0.5)).is_err());
        assert!(g.nearest_cell(Point::new(0.5, -0.1)).is_err());
    }

    #[test]
    fn centers_tile_with_exact_spacing() {
        let g = Grid::new(8, 5).unwrap();
        let mut xs: Vec<f64> = g.centers().iter().map(|c| c.x1).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        assert_eq!(xs.len(), 8);
        for w in xs.windows(2) {
            assert!((w[1] - w[0] - g.hx()).abs() < 1e-15);
        }
        let mut ys: Vec<f64> = g.centers().iter().map(|c| c.x2).collect();
        ys.sort_by(f64::total_cmp);
        ys.dedup();
        assert_eq!(ys.len(), 5);
        for w in ys.windows(2) {
            assert!((w[1] - w[0] - g.hy()).abs() < 1e-15);
        }
        assert!((xs[0] - 0.5 * g.hx()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn nearest_cell_of_center_is_itself(nx in 2usize..20, ny in 2usize..20) {
            let g = Grid::new(nx, ny).unwrap();
            for k in 0..g.len() {
                prop_assert_eq!(g.nearest_cell(g.center(k)).unwrap(), k);
                let (i, j) = g.ij(k);
                prop_assert_eq!(g.index(i, j), k);
            }
        }
    }
}
