use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::ensemble::StateVector;
use crate::linalg::DirichletLaplacian2d;

/// State-independent diffusion `σ`.
#[derive(Debug, Clone)]
pub enum DiffusionOperator {
    Zero(usize),
    /// `σ = diag(d)`.
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
    /// `σ = scale · blkdiag(Δ⁻¹, …, Δ⁻¹)` with `blocks` copies of a
    /// Dirichlet Laplacian.
    InverseLaplacianBlocks {
        laplacian: Arc<DirichletLaplacian2d>,
        blocks: usize,
        scale: f64,
    },
}

impl DiffusionOperator {
    pub fn dim(&self) -> usize {
        match self {
            DiffusionOperator::Zero(n) => *n,
            DiffusionOperator::Diagonal(d) => d.len(),
            DiffusionOperator::Dense(m) => m.nrows(),
            DiffusionOperator::InverseLaplacianBlocks {
                laplacian, blocks, ..
            } => laplacian.len() * blocks,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            DiffusionOperator::Zero(_) => true,
            DiffusionOperator::Diagonal(d) => d.iter().all(|&v| v == 0.0),
            DiffusionOperator::Dense(m) => m.iter().all(|&v| v == 0.0),
            DiffusionOperator::InverseLaplacianBlocks { scale, .. } => *scale == 0.0,
        }
    }

    fn blockwise(
        lap: &DirichletLaplacian2d,
        blocks: usize,
        v: &DVector<f64>,
        f: impl Fn(&[f64]) -> DVector<f64>,
    ) -> DVector<f64> {
        let n = lap.len();
        let mut out = DVector::zeros(n * blocks);
        for b in 0..blocks {
            let w = f(&v.as_slice()[b * n..(b + 1) * n]);
            out.rows_mut(b * n, n).copy_from(&w);
        }
        out
    }

    /// `σ ξ`.
    pub fn apply(&self, xi: &DVector<f64>) -> StateVector {
        match self {
            DiffusionOperator::Zero(n) => DVector::zeros(*n),
            DiffusionOperator::Diagonal(d) => xi.component_mul(d),
            DiffusionOperator::Dense(m) => m * xi,
            DiffusionOperator::InverseLaplacianBlocks {
                laplacian,
                blocks,
                scale,
            } => Self::blockwise(laplacian, *blocks, xi, |s| laplacian.solve(s)) * *scale,
        }
    }

    /// `(σσᵀ/2) v`.
    pub fn half_quadratic(&self, v: &DVector<f64>) -> StateVector {
        match self {
            DiffusionOperator::Zero(n) => DVector::zeros(*n),
            DiffusionOperator::Diagonal(d) => v.zip_map(d, |x, s| 0.5 * s * s * x),
            DiffusionOperator::Dense(m) => m * m.tr_mul(v) * 0.5,
            DiffusionOperator::InverseLaplacianBlocks {
                laplacian,
                blocks,
                scale,
            } => {
                let once = Self::blockwise(laplacian, *blocks, v, |s| laplacian.solve(s));
                Self::blockwise(laplacian, *blocks, &once, |s| laplacian.solve(s)) * (0.5 * scale * scale)
            }
        }
    }

    /// Dense `σσᵀ/2`.
    pub fn half_quadratic_dense(&self) -> DMatrix<f64> {
        match self {
            DiffusionOperator::Zero(n) => DMatrix::zeros(*n, *n),
            DiffusionOperator::Diagonal(d) => DMatrix::from_diagonal(&d.map(|s| 0.5 * s * s)),
            DiffusionOperator::Dense(m) => m * m.transpose() * 0.5,
            DiffusionOperator::InverseLaplacianBlocks { .. } => {
                let n = self.dim();
                let mut out = DMatrix::zeros(n, n);
                for j in 0..n {
                    let mut e = DVector::zeros(n);
                    e[j] = 1.0;
                    out.set_column(j, &self.half_quadratic(&e));
                }
                out
            }
        }
    }
}
