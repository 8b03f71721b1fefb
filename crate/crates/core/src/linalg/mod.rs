//! Small linear-algebra kernels shared by the filters and the models.

mod banded;
mod dirichlet;
mod sparse;

pub use banded::BandedCholesky;
pub use dirichlet::DirichletLaplacian2d;
pub use sparse::CsrMatrix;

use nalgebra::DMatrix;


pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
}
