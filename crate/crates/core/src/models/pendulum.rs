//! Planar double pendulum with unit masses and rods, written as a
//! first-order index-2 DAE in `[x₁, y₁, x₂, y₂, u₁, v₁, u₂, v₂]`.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DynamicalModel;
use crate::constraints::{project_to_manifold, ConstraintSystem, Jacobian, ProjectionConfig};
use crate::ensemble::StateVector;
use crate::error::{check_dim, Error, Result};
use crate::rng;

pub const STATE_DIM: usize = 8;
pub const N_CONSTRAINTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumParams {
    pub gravity: f64,
    pub dt: f64,
    /// Newton projection onto all five constraints after each step.
    pub project: bool,
    pub projection_tol: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            dt: 0.01,
            project: true,
            projection_tol: 1e-12,
        }
    }
}

/// Zero-velocity configuration with `E₀ ≈ 56.1741` at `g = 9.8`.
pub fn reference_state() -> StateVector {
    let s = 3f64.sqrt() / 2.0;
    DVector::from_vec(vec![0.5, s, 0.5, 1.0 + s, 0.0, 0.0, 0.0, 0.0])
}

/// Both rods hanging straight down at rest.
pub fn hanging_rest() -> StateVector {
    DVector::from_vec(vec![0.0, -1.0, 0.0, -2.0, 0.0, 0.0, 0.0, 0.0])
}

/// Mirror image under `x ↦ −x`.
pub fn mirror(x: &StateVector) -> StateVector {
    let mut m = x.clone();
    for i in [0, 2, 4, 6] {
        m[i] = -m[i];
    }
    m
}

fn positions(x: &StateVector) -> Vector4<f64> {
    Vector4::new(x[0], x[1], x[2], x[3])
}

fn velocities(x: &StateVector) -> Vector4<f64> {
    Vector4::new(x[4], x[5], x[6], x[7])
}

/// Position-constraint Jacobian `Φ_q` (2×4) of the two rod lengths.
fn phi_q(q: &Vector4<f64>) -> nalgebra::Matrix2x4<f64> {
    let (dx, dy) = (q[2] - q[0], q[3] - q[1]);
    nalgebra::Matrix2x4::new(q[0], q[1], 0.0, 0.0, -dx, -dy, dx, dy)
}

fn solve2(m: Matrix2<f64>, rhs: Vector2<f64>, context: &'static str) -> Result<Vector2<f64>> {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if m.determinant().abs() <= 1e-14 * scale * scale {
        return Err(Error::SingularSystem {
            context,
            hint: "degenerate rod geometry",
        });
    }
    m.lu().solve(&rhs).ok_or(Error::SingularSystem {
        context,
        hint: "degenerate rod geometry",
    })
}

#[derive(Debug, Clone)]
pub struct DoublePendulum {
    pub params: PendulumParams,
    /// Total mechanical energy anchor.
    pub e0: f64,
}

impl DoublePendulum {
    pub fn new(params: PendulumParams, e0: f64) -> Self {
        Self { params, e0 }
    }

    /// Anchored at the energy of `x`.
    pub fn anchored_at(params: PendulumParams, x: &StateVector) -> Self {
        Self::new(params, energy(x, params.gravity))
    }

    fn gravity_force(&self) -> Vector4<f64> {
        let g = self.params.gravity;
        Vector4::new(0.0, -g, 0.0, -g)
    }

    /// Accelerations and rod tensions `(λ₁, λ₂)`.
    pub fn rhs(&self, x: &StateVector) -> Result<(Vector4<f64>, Vector2<f64>)> {
        check_dim("pendulum state", STATE_DIM, x.len())?;
        let (x1, y1) = (x[0], x[1]);
        let (dx, dy) = (x[2] - x[0], x[3] - x[1]);
        let (du, dv) = (x[6] - x[4], x[7] - x[5]);
        let c = -(x1 * dx + y1 * dy);
        let m = Matrix2::new(x1 * x1 + y1 * y1, c, c, 2.0 * (dx * dx + dy * dy));
        let b = Vector2::new(
            x[4] * x[4] + x[5] * x[5] - self.params.gravity * y1,
            du * du + dv * dv,
        );
        let lam = solve2(m, b, "pendulum tension system")?;
        let q = positions(x);
        let acc = self.gravity_force() - phi_q(&q).transpose() * lam;
        Ok((acc, lam))
    }

    /// Two-stage partitioned half-explicit step. The multiplier of each
    /// stage is fixed by the hidden velocity constraint at the next
    /// stage position.
    pub fn pherk2_step(&self, x: &StateVector, dt: f64) -> Result<StateVector> {
        check_dim("pendulum state", STATE_DIM, x.len())?;
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter {
                name: "dt",
                value: dt,
                reason: "must be positive",
            });
        }
        let f = self.gravity_force();
        let q0 = positions(x);
        let v0 = velocities(x);
        let g0 = phi_q(&q0);

        let q2 = q0 + v0 * dt;
        let g2 = phi_q(&q2);
        let m1 = g2 * g0.transpose() * dt;
        let l1 = solve2(m1, g2 * (v0 + f * dt), "PHERK stage 1 multiplier")?;
        let v2 = v0 + (f - g0.transpose() * l1) * dt;

        let q1 = q0 + (v0 + v2) * (0.5 * dt);
        let g1 = phi_q(&q1);
        let partial = v0 + f * dt - g0.transpose() * l1 * (0.5 * dt);
        let m2 = g1 * g2.transpose() * (0.5 * dt);
        let l2 = solve2(m2, g1 * partial, "PHERK stage 2 multiplier")?;
        let v1 = partial - g2.transpose() * l2 * (0.5 * dt);

        let mut out = DVector::zeros(STATE_DIM);
        out.rows_mut(0, 4).copy_from(&q1);
        out.rows_mut(4, 4).copy_from(&v1);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "PHERK step",
                member: 0,
            });
        }
        Ok(out)
    }

    pub fn constraints(&self) -> PendulumConstraints {
        PendulumConstraints {
            gravity: self.params.gravity,
            e0: self.e0,
        }
    }

    pub fn project(&self, x: &StateVector) -> Result<StateVector> {
        let cfg = ProjectionConfig {
            tol: self.params.projection_tol,
            ..ProjectionConfig::default()
        };
        let cs = self.constraints();
        match project_to_manifold(x, &cs, x, &cfg) {
            Ok(r) => Ok(r.x),
            Err(Error::ProjectionFailed { .. } | Error::RankDeficient { .. }) => {
                let start = self.restore_geometry(x);
                Ok(project_to_manifold(&start, &cs, &start, &cfg)?.x)
            }
            Err(e) => Err(e),
        }
    }

    /// Unit rods, velocities tangent to them and, when the potential
    /// allows it, kinetic energy rescaled to the anchor. A starting point
    /// for Newton when `x` is far from the manifold.
    fn restore_geometry(&self, x: &StateVector) -> StateVector {
        let unit = |a: f64, b: f64| {
            let n = a.hypot(b);
            if n > 0.0 {
                (a / n, b / n)
            } else {
                (0.0, -1.0)
            }
        };
        let (e1x, e1y) = unit(x[0], x[1]);
        let (e2x, e2y) = unit(x[2] - x[0], x[3] - x[1]);
        let (u1, v1) = (x[4], x[5]);
        let r1 = u1 * e1x + v1 * e1y;
        let (u1, v1) = (u1 - r1 * e1x, v1 - r1 * e1y);
        let (du, dv) = (x[6] - x[4], x[7] - x[5]);
        let r2 = du * e2x + dv * e2y;
        let (du, dv) = (du - r2 * e2x, dv - r2 * e2y);
        let mut y = DVector::from_vec(vec![
            e1x,
            e1y,
            e1x + e2x,
            e1y + e2y,
            u1,
            v1,
            u1 + du,
            v1 + dv,
        ]);
        let potential = energy(&y, self.params.gravity) - 0.5 * y.rows(4, 4).norm_squared();
        let kinetic = 0.5 * y.rows(4, 4).norm_squared();
        let target = self.e0 - potential;
        if kinetic > 0.0 && target > 0.0 {
            let k = (target / kinetic).sqrt();
            y.rows_mut(4, 4).scale_mut(k);
        }
        y
    }

    /// `n + 1` states spaced `dt_samp` apart, starting from `start`.
    pub fn trajectory(&self, start: &StateVector, n: usize, dt_samp: f64) -> Result<Vec<StateVector>> {
        let mut out = Vec::with_capacity(n + 1);
        out.push(start.clone());
        for _ in 0..n {
            let mut x = self.pherk2_step(out.last().unwrap(), dt_samp)?;
            if self.params.project {
                x = self.project(&x)?;
            }
            out.push(x);
        }
        Ok(out)
    }

    /// Truth and `n_e` members drawn without repetition from a trajectory
    /// of `n_e + 1` samples.
    pub fn sample_truth_and_members(
        &self,
        start: &StateVector,
        n_e: usize,
        dt_samp: f64,
        seed: u64,
    ) -> Result<(StateVector, Vec<StateVector>)> {
        let mut states = self.trajectory(start, n_e, dt_samp)?;
        states.shuffle(&mut rng::stream(&[rng::tag::ENSEMBLE_INIT, seed]));
        let truth = states.remove(0);
        Ok((truth, states))
    }
}

impl DynamicalModel for DoublePendulum {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn time_step(&self) -> f64 {
        self.params.dt
    }

    fn step(&self, x: &StateVector) -> Result<StateVector> {
        let y = self.pherk2_step(x, self.params.dt)?;
        if self.params.project {
            self.project(&y)
        } else {
            Ok(y)
        }
    }
}

/// `½|v|² + g(y₁ + y₂ + 3)`, zero at the hanging rest state.
pub fn energy(x: &StateVector, gravity: f64) -> f64 {
    0.5 * (x[4] * x[4] + x[5] * x[5] + x[6] * x[6] + x[7] * x[7]) + gravity * (x[1] + x[3] + 3.0)
}

/// Rod lengths, rod-orthogonal velocities and total energy.
#[derive(Debug, Clone, Copy)]
pub struct PendulumConstraints {
    pub gravity: f64,
    pub e0: f64,
}

impl ConstraintSystem for PendulumConstraints {
    fn n_c(&self) -> usize {
        N_CONSTRAINTS
    }

    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn eval(&self, x: &StateVector) -> DVector<f64> {
        let (dx, dy) = (x[2] - x[0], x[3] - x[1]);
        let (du, dv) = (x[6] - x[4], x[7] - x[5]);
        DVector::from_vec(vec![
            0.5 * (x[0] * x[0] + x[1] * x[1] - 1.0),
            0.5 * (dx * dx + dy * dy - 1.0),
            x[0] * x[4] + x[1] * x[5],
            dx * du + dy * dv,
            energy(x, self.gravity) - self.e0,
        ])
    }

    fn jacobian(&self, x: &StateVector) -> Jacobian {
        let (dx, dy) = (x[2] - x[0], x[3] - x[1]);
        let (du, dv) = (x[6] - x[4], x[7] - x[5]);
        let g = self.gravity;
        #[rustfmt::skip]
        let rows = [
            x[0], x[1], 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            -dx, -dy, dx, dy, 0.0, 0.0, 0.0, 0.0,
            x[4], x[5], 0.0, 0.0, x[0], x[1], 0.0, 0.0,
            -du, -dv, du, dv, -dx, -dy, dx, dy,
            0.0, g, 0.0, g, x[4], x[5], x[6], x[7],
        ];
        Jacobian::Dense(DMatrix::from_row_slice(N_CONSTRAINTS, STATE_DIM, &rows))
    }

    fn row_magnitudes(&self, x: &StateVector) -> DVector<f64> {
        let (dx, dy) = (x[2] - x[0], x[3] - x[1]);
        let (du, dv) = (x[6] - x[4], x[7] - x[5]);
        let ke = 0.5 * (x[4] * x[4] + x[5] * x[5] + x[6] * x[6] + x[7] * x[7]);
        DVector::from_vec(vec![
            0.5 * (x[0] * x[0] + x[1] * x[1] + 1.0),
            0.5 * (dx * dx + dy * dy + 1.0),
            (x[0] * x[4]).abs() + (x[1] * x[5]).abs(),
            (dx * du).abs() + (dy * dv).abs(),
            ke + self.gravity * (x[1].abs() + x[3].abs() + 3.0) + self.e0.abs(),
        ])
    }
}
