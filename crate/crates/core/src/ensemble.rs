//! Ensemble containers, sample statistics and the two covariance
//! regularizations used by the particle flows: static shrinkage towards the
//! identity and a scaled squared Laplacian-like precision.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{symmetrize, CsrMatrix};

/// A model state `x ∈ ℝ^{n_s}`.
pub type StateVector = DVector<f64>;

/// `n_s × n_e` matrix whose columns are the ensemble members.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() == 0 {
            return Err(Error::EmptyEnsemble);
        }
        if let Some(k) = members.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "ensemble construction",
                member: k / members.nrows().max(1),
            });
        }
        Ok(Self { members })
    }

    pub fn from_columns(columns: &[StateVector]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        let n = columns[0].len();
        for c in columns {
            check_dim("ensemble member length", n, c.len())?;
        }
        Self::new(DMatrix::from_columns(columns))
    }

    pub fn state_dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn member(&self, e: usize) -> StateVector {
        self.members.column(e).into_owned()
    }

    pub fn members(&self) -> impl Iterator<Item = StateVector> + '_ {
        self.members.column_iter().map(|c| c.into_owned())
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.members
    }

    pub fn mean(&self) -> StateVector {
        ensemble_mean(self)
    }

    /// Sample variance of each state component (divisor `n_e − 1`).
    pub fn variances(&self) -> Result<StateVector> {
        let a = ensemble_anomalies(self)?;
        let denom = (self.size() - 1) as f64;
        Ok(DVector::from_iterator(
            a.nrows(),
            a.row_iter().map(|r| r.norm_squared() / denom),
        ))
    }
}

pub fn ensemble_mean(ens: &Ensemble) -> StateVector {
    ens.members.column_mean()
}

/// Columns `x_e − x̄`.
pub fn ensemble_anomalies(ens: &Ensemble) -> Result<DMatrix<f64>> {
    if ens.size() < 2 {
        return Err(Error::TooFewMembers {
            need: 2,
            got: ens.size(),
        });
    }
    let mean = ens.mean();
    let mut a = ens.members.clone();
    for mut c in a.column_iter_mut() {
        c -= &mean;
    }
    Ok(a)
}

/// Symmetric positive semidefinite covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    matrix: DMatrix<f64>,
}

impl CovarianceEstimate {
    pub fn new(mut matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch {
                context: "covariance must be square",
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::NotPositiveDefinite {
                context: "covariance estimate",
                detail: format!("asymmetry {asym:.3e}"),
            });
        }
        symmetrize(&mut matrix);
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Unbiased sample covariance `A Aᵀ / (n_e − 1)`.
pub fn empirical_covariance(ens: &Ensemble) -> Result<CovarianceEstimate> {
    let a = ensemble_anomalies(ens)?;
    let mut p = &a * a.transpose() / (ens.size() - 1) as f64;
    symmetrize(&mut p);
    Ok(CovarianceEstimate { matrix: p })
}

/// `γ P + (1 − γ) I`.
pub fn shrink_covariance(cov: &CovarianceEstimate, gamma_sh: f64) -> Result<CovarianceEstimate> {
    if !(0.0..=1.0).contains(&gamma_sh) {
        return Err(Error::InvalidParameter {
            name: "gamma_sh",
            value: gamma_sh,
            reason: "shrinkage weight must lie in [0, 1]",
        });
    }
    let n = cov.dim();
    let matrix = &cov.matrix * gamma_sh + DMatrix::identity(n, n) * (1.0 - gamma_sh);
    Ok(CovarianceEstimate { matrix })
}

/// Regularized inverse-covariance operator.
#[derive(Debug, Clone)]
pub enum PrecisionOperator {
    /// Inverse of a shrunk dense covariance, factorized once.
    ShrunkDense {
        covariance: DMatrix<f64>,
        factor: Cholesky<f64, Dyn>,
    },
    /// `v ↦ scale · L (L v)`.
    ScaledSquaredLaplacian { laplacian: Arc<CsrMatrix>, scale: f64 },
}

impl PrecisionOperator {
    /// Precision of `γ P + (1 − γ) I` for the sample covariance `P` of `ens`.
    pub fn shrunk(ens: &Ensemble, gamma_sh: f64) -> Result<Self> {
        let cov = shrink_covariance(&empirical_covariance(ens)?, gamma_sh)?;
        Self::from_covariance(&cov)
    }

    pub fn from_covariance(cov: &CovarianceEstimate) -> Result<Self> {
        let factor = Cholesky::new(cov.matrix.clone()).ok_or_else(|| Error::NotPositiveDefinite {
            context: "shrunk covariance",
            detail: "Cholesky factorization failed".into(),
        })?;
        Ok(PrecisionOperator::ShrunkDense {
            covariance: cov.matrix.clone(),
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            PrecisionOperator::ShrunkDense { covariance, .. } => covariance.nrows(),
            PrecisionOperator::ScaledSquaredLaplacian { laplacian, .. } => laplacian.nrows(),
        }
    }

    pub fn apply(&self, v: &StateVector) -> Result<StateVector> {
        check_dim("precision application", self.dim(), v.len())?;
        Ok(match self {
            PrecisionOperator::ShrunkDense { factor, .. } => factor.solve(v),
            PrecisionOperator::ScaledSquaredLaplacian { laplacian, scale } => {
                laplacian.mul_vec(&laplacian.mul_vec(v)) * *scale
            }
        })
    }

    /// Dense matrix of the operator.
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            PrecisionOperator::ShrunkDense { factor, .. } => {
                let mut inv = factor.inverse();
                symmetrize(&mut inv);
                inv
            }
            PrecisionOperator::ScaledSquaredLaplacian { laplacian, scale } => {
                let l = laplacian.to_dense();
                &l * &l * *scale
            }
        }
    }
}

/// Builds `s · L²` with `s = 1 / max_i Var_i(ens)`.
pub fn laplacian_precision(lap: Arc<CsrMatrix>, ens: &Ensemble) -> Result<PrecisionOperator> {
    check_dim("Laplacian precision (square)", lap.nrows(), lap.ncols())?;
    check_dim("Laplacian precision (state dimension)", ens.state_dim(), lap.nrows())?;
    let max_var = ens.variances()?.max();
    if !(max_var > 0.0) {
        return Err(Error::DegenerateEnsemble(
            "zero ensemble spread, maximum variance is 0",
        ));
    }
    Ok(PrecisionOperator::ScaledSquaredLaplacian {
        laplacian: lap,
        scale: 1.0 / max_var,
    })
}

/// Recipe for turning an ensemble into a precision operator.
#[derive(Debug, Clone)]
pub enum PrecisionModel {
    /// Inverse of `γ P + (1 − γ) I`.
    Shrinkage { gamma_sh: f64 },
    /// `s L²` with `s` the inverse of the largest ensemble variance.
    ScaledLaplacian(Arc<CsrMatrix>),
    /// `s L²` with `s` the largest ensemble variance itself.
    VarianceWeightedLaplacian(Arc<CsrMatrix>),
}

impl PrecisionModel {
    pub fn build(&self, ens: &Ensemble) -> Result<PrecisionOperator> {
        match self {
            PrecisionModel::Shrinkage { gamma_sh } => PrecisionOperator::shrunk(ens, *gamma_sh),
            PrecisionModel::ScaledLaplacian(l) => laplacian_precision(l.clone(), ens),
            PrecisionModel::VarianceWeightedLaplacian(l) => match laplacian_precision(l.clone(), ens)? {
                PrecisionOperator::ScaledSquaredLaplacian { laplacian, scale } => {
                    Ok(PrecisionOperator::ScaledSquaredLaplacian {
                        laplacian,
                        scale: 1.0 / scale,
                    })
                }
                other => Ok(other),
            },
        }
    }
}

pub fn apply_precision(prec: &PrecisionOperator, v: &StateVector) -> Result<StateVector> {
    prec.apply(v)
}
