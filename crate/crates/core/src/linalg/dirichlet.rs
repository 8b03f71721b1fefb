use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;

use super::CsrMatrix;

/// Five-point Laplacian on an `nx × ny` block of unknowns with zero values
/// on the surrounding ghost ring, diagonalized by the type-I sine transform.
///
/// Vectors are laid out with `i` (x) fastest: `v[j * nx + i]`.
#[derive(Debug, Clone)]
pub struct DirichletLaplacian2d {
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
    sx: DMatrix<f64>,
    sy: DMatrix<f64>,
    eig: DMatrix<f64>,
}

fn sine_basis(n: usize) -> DMatrix<f64> {
    let scale = (2.0 / (n as f64 + 1.0)).sqrt();
    DMatrix::from_fn(n, n, |i, k| {
        scale * (PI * (i as f64 + 1.0) * (k as f64 + 1.0) / (n as f64 + 1.0)).sin()
    })
}

fn second_difference_eigs(n: usize, h: f64) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let s = (PI * (k as f64 + 1.0) / (2.0 * (n as f64 + 1.0))).sin();
            -4.0 * s * s / (h * h)
        })
        .collect()
}

impl DirichletLaplacian2d {
    pub fn new(nx: usize, ny: usize, hx: f64, hy: f64) -> Self {
        let ex = second_difference_eigs(nx, hx);
        let ey = second_difference_eigs(ny, hy);
        Self {
            nx,
            ny,
            hx,
            hy,
            sx: sine_basis(nx),
            sy: sine_basis(ny),
            eig: DMatrix::from_fn(nx, ny, |i, j| ex[i] + ey[j]),
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    /// Eigenvalue of the mode `(kx, ky)` (zero based).
    pub fn eigenvalue(&self, kx: usize, ky: usize) -> f64 {
        self.eig[(kx, ky)]
    }

    fn spectral_map(&self, v: &[f64], f: impl Fn(f64) -> f64) -> DVector<f64> {
        assert_eq!(v.len(), self.len());
        let m = DMatrix::from_column_slice(self.nx, self.ny, v);
        let mut hat = &self.sx * m * &self.sy;
        hat.zip_apply(&self.eig, |h, e| *h *= f(e));
        let out = &self.sx * hat * &self.sy;
        DVector::from_column_slice(out.as_slice())
    }

    /// Solves `Δ w = v`.
    pub fn solve(&self, v: &[f64]) -> DVector<f64> {
        self.spectral_map(v, |e| 1.0 / e)
    }

    /// Applies `Δ` through the stencil.
    pub fn apply(&self, v: &[f64]) -> DVector<f64> {
        assert_eq!(v.len(), self.len());
        let (nx, ny) = (self.nx, self.ny);
        let (cx, cy) = (1.0 / (self.hx * self.hx), 1.0 / (self.hy * self.hy));
        let at = |i: isize, j: isize| -> f64 {
            if i < 0 || j < 0 || i >= nx as isize || j >= ny as isize {
                0.0
            } else {
                v[j as usize * nx + i as usize]
            }
        };
        DVector::from_fn(nx * ny, |k, _| {
            let (i, j) = ((k % nx) as isize, (k / nx) as isize);
            let c = at(i, j);
            cx * (at(i + 1, j) - 2.0 * c + at(i - 1, j)) + cy * (at(i, j + 1) - 2.0 * c + at(i, j - 1))
        })
    }

    pub fn to_csr(&self) -> CsrMatrix {
        let (nx, ny) = (self.nx, self.ny);
        let (cx, cy) = (1.0 / (self.hx * self.hx), 1.0 / (self.hy * self.hy));
        let mut t = Vec::with_capacity(5 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let k = j * nx + i;
                t.push((k, k, -2.0 * cx - 2.0 * cy));
                if i > 0 {
                    t.push((k, k - 1, cx));
                }
                if i + 1 < nx {
                    t.push((k, k + 1, cx));
                }
                if j > 0 {
                    t.push((k, k - nx, cy));
                }
                if j + 1 < ny {
                    t.push((k, k + nx, cy));
                }
            }
        }
        CsrMatrix::from_triplets(nx * ny, nx * ny, &t)
    }
}
