//! Constrained forward models used in the twin experiments.

pub mod kdv;
pub mod ns;
pub mod pendulum;

use std::fmt::Debug;

use crate::ensemble::StateVector;
use crate::error::Result;

/// A deterministic forecast model.
pub trait DynamicalModel: Debug + Send + Sync {
    fn state_dim(&self) -> usize;
    /// Internal integrator step.
    fn time_step(&self) -> f64;
    fn step(&self, x: &StateVector) -> Result<StateVector>;

    /// Takes `n` internal steps.
    fn advance(&self, x: &StateVector, n: usize) -> Result<StateVector> {
        let mut x = x.clone();
        for _ in 0..n {
            x = self.step(&x)?;
        }
        Ok(x)
    }
}

/// Observed slope of `log error` against `log h` by least squares.
pub fn log_log_slope(h: &[f64], err: &[f64]) -> f64 {
    let n = h.len() as f64;
    let xs: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
