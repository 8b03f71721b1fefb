//! Periodic Korteweg-de Vries equation `x_t + 3 (x²)_x + x_xxx = 0` on
//! `[−10, 10)` with second-order central differences.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::DynamicalModel;
use crate::constraints::{ConstraintSystem, Jacobian};
use crate::ensemble::StateVector;
use crate::error::{check_dim, Error, Result};
use crate::linalg::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdvParams {
    pub n: usize,
    pub length: f64,
    pub dt: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for KdvParams {
    fn default() -> Self {
        Self {
            n: 100,
            length: 20.0,
            dt: 0.01,
            newton_tol: 1e-11,
            newton_max_iter: 25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Kdv {
    pub params: KdvParams,
}

impl Kdv {
    pub fn new(params: KdvParams) -> Result<Self> {
        if params.n < 5 {
            return Err(Error::InvalidParameter {
                name: "kdv.n",
                value: params.n as f64,
                reason: "need at least 5 grid points",
            });
        }
        if !(params.length > 0.0) || !(params.dt > 0.0) {
            return Err(Error::InvalidParameter {
                name: "kdv.dt",
                value: params.dt,
                reason: "length and dt must be positive",
            });
        }
        Ok(Self { params })
    }

    pub fn dx(&self) -> f64 {
        self.params.length / self.params.n as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        let h = self.dx();
        (0..self.params.n)
            .map(|i| -0.5 * self.params.length + i as f64 * h)
            .collect()
    }

    /// `6 sech²(x)`: the two-soliton initial condition.
    pub fn two_soliton(&self) -> StateVector {
        DVector::from_iterator(self.params.n, self.grid().into_iter().map(|x| 6.0 / x.cosh().powi(2)))
    }

    /// Tendency with the Zabusky–Kruskal product for the nonlinear flux.
    pub fn rhs(&self, x: &StateVector) -> StateVector {
        let n = self.params.n;
        let h = self.dx();
        let c3 = 1.0 / (2.0 * h * h * h);
        let at = |i: isize| x[i.rem_euclid(n as isize) as usize];
        DVector::from_fn(n, |i, _| {
            let i = i as isize;
            let (a, b, c) = (at(i + 1), at(i), at(i - 1));
            let nonlinear = (a + b + c) * (a - c) / h;
            let disp = (at(i + 2) - 2.0 * a + 2.0 * c - at(i - 2)) * c3;
            -nonlinear - disp
        })
    }

    /// Dense Jacobian of [`rhs`](Self::rhs).
    pub fn rhs_jacobian(&self, x: &StateVector) -> DMatrix<f64> {
        let n = self.params.n;
        let h = self.dx();
        let c3 = 1.0 / (2.0 * h * h * h);
        let w = |i: isize| i.rem_euclid(n as isize) as usize;
        let mut j = DMatrix::zeros(n, n);
        for i in 0..n as isize {
            let r = i as usize;
            let (a, b, c) = (x[w(i + 1)], x[r], x[w(i - 1)]);
            j[(r, w(i + 1))] -= (2.0 * a + b) / h;
            j[(r, r)] -= (a - c) / h;
            j[(r, w(i - 1))] += (b + 2.0 * c) / h;
            j[(r, w(i + 2))] -= c3;
            j[(r, w(i + 1))] += 2.0 * c3;
            j[(r, w(i - 1))] -= 2.0 * c3;
            j[(r, w(i - 2))] += c3;
        }
        j
    }

    /// Solves `x₁ = x₀ + dt·f((x₀ + x₁)/2)` by Newton on the midpoint.
    pub fn implicit_midpoint_step(&self, x0: &StateVector, dt: f64) -> Result<StateVector> {
        check_dim("kdv state", self.params.n, x0.len())?;
        let half = 0.5 * dt;
        let mut z = x0 + self.rhs(x0) * half;
        let mut residual = f64::INFINITY;
        for _ in 0..self.params.newton_max_iter {
            let r = &z - x0 - self.rhs(&z) * half;
            residual = 2.0 * r.amax();
            if residual < self.params.newton_tol {
                return Ok(z * 2.0 - x0);
            }
            if !residual.is_finite() {
                break;
            }
            let jac = DMatrix::identity(self.params.n, self.params.n) - self.rhs_jacobian(&z) * half;
            let dz = jac.lu().solve(&r).ok_or(Error::SingularSystem {
                context: "implicit midpoint Newton matrix",
                hint: "reduce dt",
            })?;
            z -= dz;
        }
        Err(Error::NewtonFailed {
            context: "KdV implicit midpoint",
            residual,
            hint: "reduce dt",
        })
    }

    /// Discrete `[∫x, ∫x², ∫(½ x_x² − x³)]` with a forward difference for `x_x`.
    pub fn invariants(&self, x: &StateVector) -> DVector<f64> {
        let n = self.params.n;
        let h = self.dx();
        let mut phi = [0.0; 3];
        for i in 0..n {
            let xi = x[i];
            let fx = (x[(i + 1) % n] - xi) / h;
            phi[0] += xi;
            phi[1] += xi * xi;
            phi[2] += 0.5 * fx * fx - xi * xi * xi;
        }
        DVector::from_iterator(3, phi.iter().map(|p| p * h))
    }

    pub fn constraints(&self, anchor: &StateVector) -> KdvConstraints {
        KdvConstraints {
            model: self.clone(),
            target: self.invariants(anchor),
        }
    }

    /// Periodic second difference `Δ` scaled by `1/Δx²`.
    pub fn periodic_laplacian(&self) -> CsrMatrix {
        let n = self.params.n;
        let c = 1.0 / (self.dx() * self.dx());
        let mut t = Vec::with_capacity(3 * n);
        for i in 0..n {
            t.push((i, i, -2.0 * c));
            t.push((i, (i + 1) % n, c));
            t.push((i, (i + n - 1) % n, c));
        }
        CsrMatrix::from_triplets(n, n, &t)
    }
}

impl DynamicalModel for Kdv {
    fn state_dim(&self) -> usize {
        self.params.n
    }

    fn time_step(&self) -> f64 {
        self.params.dt
    }

    fn step(&self, x: &StateVector) -> Result<StateVector> {
        self.implicit_midpoint_step(x, self.params.dt)
    }
}

/// `g(x) = φ(x) − φ(anchor)`.
#[derive(Debug, Clone)]
pub struct KdvConstraints {
    model: Kdv,
    target: DVector<f64>,
}

impl KdvConstraints {
    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }
}

impl ConstraintSystem for KdvConstraints {
    fn n_c(&self) -> usize {
        3
    }

    fn state_dim(&self) -> usize {
        self.model.params.n
    }

    fn eval(&self, x: &StateVector) -> DVector<f64> {
        self.model.invariants(x) - &self.target
    }

    fn jacobian(&self, x: &StateVector) -> Jacobian {
        let n = self.model.params.n;
        let h = self.model.dx();
        let mut g = DMatrix::zeros(3, n);
        for i in 0..n {
            let ip = (i + 1) % n;
            let im = (i + n - 1) % n;
            let f_here = (x[ip] - x[i]) / h;
            let f_prev = (x[i] - x[im]) / h;
            g[(0, i)] = h;
            g[(1, i)] = 2.0 * h * x[i];
            g[(2, i)] = h * ((f_prev - f_here) / h - 3.0 * x[i] * x[i]);
        }
        Jacobian::Dense(g)
    }

    fn row_magnitudes(&self, x: &StateVector) -> DVector<f64> {
        let n = self.model.params.n;
        let h = self.model.dx();
        let mut m = [0.0; 3];
        for i in 0..n {
            let fx = (x[(i + 1) % n] - x[i]) / h;
            m[0] += x[i].abs();
            m[1] += x[i] * x[i];
            m[2] += 0.5 * fx * fx + x[i].abs().powi(3);
        }
        DVector::from_iterator(3, (0..3).map(|k| m[k] * h + self.target[k].abs()))
    }
}
