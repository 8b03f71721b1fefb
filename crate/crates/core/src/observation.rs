use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::constraints::ConstraintSystem;
use crate::ensemble::StateVector;
use crate::error::{check_dim, Error, Result};
use crate::linalg::CsrMatrix;

/// Observation operator `H: ℝ^{n_s} → ℝ^{n_o}`.
pub trait ObservationOperator: Debug + Send + Sync {
    fn obs_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn apply(&self, x: &StateVector) -> DVector<f64>;
    /// `H'(x)ᵀ v`.
    fn adjoint(&self, x: &StateVector, v: &DVector<f64>) -> StateVector;

    /// Dense `H'(x)`, assembled column by column from the adjoint.
    fn jacobian_dense(&self, x: &StateVector) -> DMatrix<f64> {
        let (m, n) = (self.obs_dim(), self.state_dim());
        let mut out = DMatrix::zeros(m, n);
        for i in 0..m {
            let mut e = DVector::zeros(m);
            e[i] = 1.0;
            out.set_row(i, &self.adjoint(x, &e).transpose());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LinearObservation {
    matrix: CsrMatrix,
}

impl LinearObservation {
    pub fn new(matrix: CsrMatrix) -> Self {
        Self { matrix }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(CsrMatrix::identity(n))
    }

    /// Observes the listed state components.
    pub fn selection(state_dim: usize, indices: &[usize]) -> Self {
        let t: Vec<_> = indices.iter().enumerate().map(|(r, &c)| (r, c, 1.0)).collect();
        Self::new(CsrMatrix::from_triplets(indices.len(), state_dim, &t))
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }
}

impl ObservationOperator for LinearObservation {
    fn obs_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn state_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn apply(&self, x: &StateVector) -> DVector<f64> {
        self.matrix.mul_vec(x)
    }

    fn adjoint(&self, _x: &StateVector, v: &DVector<f64>) -> StateVector {
        self.matrix.tr_mul_vec(v)
    }

    fn jacobian_dense(&self, _x: &StateVector) -> DMatrix<f64> {
        self.matrix.to_dense()
    }
}

/// `[H(x); g(x)]`.
#[derive(Debug, Clone)]
pub struct AugmentedOperator {
    base: Arc<dyn ObservationOperator>,
    constraints: Arc<dyn ConstraintSystem>,
}

impl AugmentedOperator {
    pub fn new(base: Arc<dyn ObservationOperator>, constraints: Arc<dyn ConstraintSystem>) -> Self {
        Self { base, constraints }
    }
}

impl ObservationOperator for AugmentedOperator {
    fn obs_dim(&self) -> usize {
        self.base.obs_dim() + self.constraints.n_c()
    }

    fn state_dim(&self) -> usize {
        self.base.state_dim()
    }

    fn apply(&self, x: &StateVector) -> DVector<f64> {
        let h = self.base.apply(x);
        let g = self.constraints.eval(x);
        DVector::from_iterator(h.len() + g.len(), h.iter().chain(g.iter()).copied())
    }

    fn adjoint(&self, x: &StateVector, v: &DVector<f64>) -> StateVector {
        let m = self.base.obs_dim();
        let vh = v.rows(0, m).into_owned();
        let vg = v.rows(m, v.len() - m).into_owned();
        let mut out = self.base.adjoint(x, &vh);
        out += self.constraints.jacobian(x).tr_mul_vec(&vg);
        out
    }
}

/// Symmetric positive definite observation error covariance.
#[derive(Debug, Clone)]
pub enum ObsCovariance {
    Diagonal(DVector<f64>),
    Dense {
        matrix: DMatrix<f64>,
        factor: Cholesky<f64, Dyn>,
    },
}

impl ObsCovariance {
    pub fn scaled_identity(n: usize, variance: f64) -> Result<Self> {
        Self::diagonal(DVector::from_element(n, variance))
    }

    pub fn diagonal(d: DVector<f64>) -> Result<Self> {
        if let Some(&v) = d.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter {
                name: "observation variance",
                value: v,
                reason: "variances must be positive and finite",
            });
        }
        Ok(ObsCovariance::Diagonal(d))
    }

    pub fn dense(matrix: DMatrix<f64>, context: &'static str) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch {
                context,
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        let factor = Cholesky::new(matrix.clone()).ok_or_else(|| Error::NotPositiveDefinite {
            context,
            detail: "Cholesky factorization failed".into(),
        })?;
        Ok(ObsCovariance::Dense { matrix, factor })
    }

    /// Chooses the diagonal representation when `matrix` is diagonal.
    pub fn from_matrix(matrix: DMatrix<f64>, context: &'static str) -> Result<Self> {
        let off = matrix.iter().enumerate().any(|(k, &v)| {
            let (i, j) = (k % matrix.nrows().max(1), k / matrix.nrows().max(1));
            i != j && v != 0.0
        });
        if off || !matrix.is_square() {
            Self::dense(matrix, context)
        } else {
            Self::diagonal(matrix.diagonal()).map_err(|_| Error::NotPositiveDefinite {
                context,
                detail: "non-positive diagonal entry".into(),
            })
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ObsCovariance::Diagonal(d) => d.len(),
            ObsCovariance::Dense { matrix, .. } => matrix.nrows(),
        }
    }

    pub fn as_diagonal(&self) -> Option<&DVector<f64>> {
        match self {
            ObsCovariance::Diagonal(d) => Some(d),
            ObsCovariance::Dense { .. } => None,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            ObsCovariance::Diagonal(d) => DMatrix::from_diagonal(d),
            ObsCovariance::Dense { matrix, .. } => matrix.clone(),
        }
    }

    /// `R⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            ObsCovariance::Diagonal(d) => v.component_div(d),
            ObsCovariance::Dense { factor, .. } => factor.solve(v),
        }
    }

    /// `R⁻¹ M` column by column.
    pub fn solve_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            ObsCovariance::Diagonal(d) => {
                let mut out = m.clone();
                for (mut row, &r) in out.row_iter_mut().zip(d.iter()) {
                    row /= r;
                }
                out
            }
            ObsCovariance::Dense { factor, .. } => factor.solve(m),
        }
    }

    /// `R^{1/2} ξ` with the lower Cholesky factor.
    pub fn sqrt_mul(&self, xi: &DVector<f64>) -> DVector<f64> {
        match self {
            ObsCovariance::Diagonal(d) => xi.zip_map(d, |x, r| x * r.sqrt()),
            ObsCovariance::Dense { factor, .. } => factor.l() * xi,
        }
    }

    pub fn block_diagonal(&self, other: &ObsCovariance) -> ObsCovariance {
        match (self, other) {
            (ObsCovariance::Diagonal(a), ObsCovariance::Diagonal(b)) => ObsCovariance::Diagonal(
                DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied()),
            ),
            _ => {
                let (n, m) = (self.dim(), other.dim());
                let mut out = DMatrix::zeros(n + m, n + m);
                out.view_mut((0, 0), (n, n)).copy_from(&self.to_dense());
                out.view_mut((n, n), (m, m)).copy_from(&other.to_dense());
                let factor = Cholesky::new(out.clone()).expect("block diagonal of SPD blocks");
                ObsCovariance::Dense { matrix: out, factor }
            }
        }
    }
}

/// Operator, data and error covariance for one analysis time.
#[derive(Debug, Clone)]
pub struct ObservationModel {
    pub operator: Arc<dyn ObservationOperator>,
    pub y: DVector<f64>,
    pub r: ObsCovariance,
}

impl ObservationModel {
    pub fn new(operator: Arc<dyn ObservationOperator>, y: DVector<f64>, r: ObsCovariance) -> Result<Self> {
        check_dim("observation data length", operator.obs_dim(), y.len())?;
        check_dim("observation covariance size", operator.obs_dim(), r.dim())?;
        Ok(Self { operator, y, r })
    }

    pub fn obs_dim(&self) -> usize {
        self.y.len()
    }

    pub fn state_dim(&self) -> usize {
        self.operator.state_dim()
    }
}
