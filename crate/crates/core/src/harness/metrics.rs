//! Cumulative spatio-temporal error statistics.

use nalgebra::DVector;

use crate::constraints::MemberConstraints;
use crate::ensemble::{Ensemble, StateVector};
use crate::error::{check_dim, Error, Result};

/// `Σ_e ‖x^{[e]} − x_true‖²`.
pub fn sq_error(ens: &Ensemble, truth: &StateVector) -> Result<f64> {
    check_dim("truth state", ens.state_dim(), truth.len())?;
    Ok(ens.members().map(|x| (x - truth).norm_squared()).sum())
}

/// `‖E g‖²` for a diagonal scaling `E`.
pub fn scaled_sq_violation(g: &DVector<f64>, scaling: &DVector<f64>) -> Result<f64> {
    check_dim("CRMSE scaling", g.len(), scaling.len())?;
    Ok(g.iter().zip(scaling.iter()).map(|(gi, si)| (gi * si).powi(2)).sum())
}

/// Per-member constraint values `g^{[e]}(x^{[e]})`.
pub fn member_violations(ens: &Ensemble, cs: &MemberConstraints) -> Vec<DVector<f64>> {
    ens.members().enumerate().map(|(e, x)| cs.get(e).eval(&x)).collect()
}

/// `sqrt(Σ_{i=ρ..=k} s_i / ((k − ρ + 1) · per_cycle))`.
pub fn cumulative_root_mean(sums: &[f64], spinup: usize, k: usize, per_cycle: usize) -> Result<f64> {
    if k < spinup {
        return Err(Error::InvalidParameter {
            name: "k",
            value: k as f64,
            reason: "statistics start at the end of the spinup",
        });
    }
    if k >= sums.len() {
        return Err(Error::DimensionMismatch {
            context: "cycle index",
            expected: sums.len(),
            got: k + 1,
        });
    }
    let total: f64 = sums[spinup..=k].iter().sum();
    Ok((total / ((k - spinup + 1) * per_cycle) as f64).sqrt())
}

/// RMSE from raw analysis ensembles and truths.
pub fn rmse_from_states(analyses: &[Ensemble], truths: &[StateVector], spinup: usize, k: usize) -> Result<f64> {
    check_dim("truth sequence", analyses.len(), truths.len())?;
    let sums = analyses
        .iter()
        .zip(truths)
        .map(|(a, t)| sq_error(a, t))
        .collect::<Result<Vec<_>>>()?;
    let first = analyses.first().ok_or(Error::EmptyEnsemble)?;
    cumulative_root_mean(&sums, spinup, k, first.size() * first.state_dim())
}

/// CRMSE from raw analysis ensembles and their constraint systems.
pub fn crmse_from_states(
    analyses: &[Ensemble],
    constraints: &[MemberConstraints],
    scaling: &DVector<f64>,
    spinup: usize,
    k: usize,
) -> Result<f64> {
    check_dim("constraint sequence", analyses.len(), constraints.len())?;
    let mut sums = Vec::with_capacity(analyses.len());
    for (a, cs) in analyses.iter().zip(constraints) {
        let mut s = 0.0;
        for g in member_violations(a, cs) {
            s += scaled_sq_violation(&g, scaling)?;
        }
        sums.push(s);
    }
    let first = analyses.first().ok_or(Error::EmptyEnsemble)?;
    cumulative_root_mean(&sums, spinup, k, first.size() * scaling.len())
}
