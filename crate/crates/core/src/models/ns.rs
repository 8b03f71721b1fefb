//! Forced barotropic vorticity (quasi-geostrophic double gyre) model in a
//! closed basin `[0, 1] × [−1, 1]`.
//!
//! The assimilated state is `[u; v]` at all `nx·ny` nodes (x fastest).
//! The model evolves vorticity on the interior nodes with zero boundary
//! values for `ω` and `ψ`.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::DynamicalModel;
use crate::constraints::{ConstraintKind, ConstraintSystem, Jacobian, LinearBlock, MemberConstraints};
use crate::ensemble::{Ensemble, StateVector};
use crate::error::{check_dim, Error, Result};
use crate::kalman::LocalizationConfig;
use crate::linalg::{CsrMatrix, DirichletLaplacian2d};
use crate::observation::LinearObservation;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NsParams {
    pub nx: usize,
    pub ny: usize,
    pub reynolds: f64,
    pub rossby: f64,
    pub dt: f64,
    /// Observation lattice points per direction.
    pub obs_per_dim: usize,
    /// Highest sine mode in the random initial vorticity.
    pub init_modes: usize,
    /// RMS of the random initial vorticity.
    pub init_amplitude: f64,
    /// Member vorticity perturbation RMS relative to the truth's.
    pub member_perturbation: f64,
}

impl Default for NsParams {
    fn default() -> Self {
        Self {
            nx: 64,
            ny: 129,
            reynolds: 450.0,
            rossby: 0.0036,
            dt: 0.0109 / 40.0,
            obs_per_dim: 16,
            init_modes: 8,
            init_amplitude: 100.0,
            member_perturbation: 0.05,
        }
    }
}

impl NsParams {
    /// Node counts multiplied by `factor`, so 0.5 maps 64×129 to 32×65.
    pub fn scaled(mut self, factor: f64) -> Self {
        let s = |n: usize| ((n as f64 * factor).round() as usize).max(5);
        self.nx = s(self.nx);
        self.ny = s(self.ny);
        self
    }
}

/// One-dimensional second-order first derivative with one-sided ends.
fn first_derivative_1d(n: usize, h: f64) -> Vec<Vec<(usize, f64)>> {
    let c = 1.0 / (2.0 * h);
    (0..n)
        .map(|i| {
            if i == 0 {
                vec![(0, -3.0 * c), (1, 4.0 * c), (2, -c)]
            } else if i == n - 1 {
                vec![(n - 3, c), (n - 2, -4.0 * c), (n - 1, 3.0 * c)]
            } else {
                vec![(i - 1, -c), (i + 1, c)]
            }
        })
        .collect()
}

#[derive(Debug)]
pub struct QgModel {
    pub params: NsParams,
    hx: f64,
    hy: f64,
    poisson: DirichletLaplacian2d,
    dx: CsrMatrix,
    dy: CsrMatrix,
    forcing: Vec<f64>,
    divergence: OnceLock<Arc<LinearBlock>>,
}

impl QgModel {
    pub fn new(params: NsParams) -> Result<Self> {
        if params.nx < 5 || params.ny < 5 {
            return Err(Error::InvalidParameter {
                name: "ns.nx",
                value: params.nx.min(params.ny) as f64,
                reason: "grid needs at least 5 nodes per direction",
            });
        }
        if !(params.dt > 0.0) {
            return Err(Error::InvalidParameter {
                name: "ns.dt",
                value: params.dt,
                reason: "must be positive",
            });
        }
        let (nx, ny) = (params.nx, params.ny);
        let hx = 1.0 / (nx - 1) as f64;
        let hy = 2.0 / (ny - 1) as f64;
        let d1x = first_derivative_1d(nx, hx);
        let d1y = first_derivative_1d(ny, hy);
        let mut tx = Vec::new();
        let mut ty = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let k = j * nx + i;
                tx.extend(d1x[i].iter().map(|&(c, v)| (k, j * nx + c, v)));
                ty.extend(d1y[j].iter().map(|&(c, v)| (k, c * nx + i, v)));
            }
        }
        let n = nx * ny;
        let mut forcing = vec![0.0; n];
        for j in 1..ny - 1 {
            let y = -1.0 + j as f64 * hy;
            for i in 1..nx - 1 {
                forcing[j * nx + i] = (PI * y).sin();
            }
        }
        Ok(Self {
            params,
            hx,
            hy,
            poisson: DirichletLaplacian2d::new(nx - 2, ny - 2, hx, hy),
            dx: CsrMatrix::from_triplets(n, n, &tx),
            dy: CsrMatrix::from_triplets(n, n, &ty),
            forcing,
            divergence: OnceLock::new(),
        })
    }

    pub fn nodes(&self) -> usize {
        self.params.nx * self.params.ny
    }

    pub fn spacing(&self) -> (f64, f64) {
        (self.hx, self.hy)
    }

    pub fn node_coords(&self, k: usize) -> [f64; 2] {
        let nx = self.params.nx;
        [(k % nx) as f64 * self.hx, -1.0 + (k / nx) as f64 * self.hy]
    }

    pub fn dx_matrix(&self) -> &CsrMatrix {
        &self.dx
    }

    pub fn dy_matrix(&self) -> &CsrMatrix {
        &self.dy
    }

    fn interior(&self, f: &[f64]) -> Vec<f64> {
        let (nx, ny) = (self.params.nx, self.params.ny);
        let mut out = Vec::with_capacity((nx - 2) * (ny - 2));
        for j in 1..ny - 1 {
            out.extend_from_slice(&f[j * nx + 1..j * nx + nx - 1]);
        }
        out
    }

    fn embed(&self, inner: &[f64]) -> DVector<f64> {
        let (nx, ny) = (self.params.nx, self.params.ny);
        let mut out = DVector::zeros(nx * ny);
        for j in 1..ny - 1 {
            let src = &inner[(j - 1) * (nx - 2)..j * (nx - 2)];
            out.as_mut_slice()[j * nx + 1..j * nx + nx - 1].copy_from_slice(src);
        }
        out
    }

    /// `ψ = −Δ⁻¹ ω` with homogeneous Dirichlet boundary values.
    pub fn poisson_solve(&self, omega: &DVector<f64>) -> DVector<f64> {
        let rhs: Vec<f64> = self.interior(omega.as_slice()).iter().map(|w| -w).collect();
        self.embed(self.poisson.solve(&rhs).as_slice())
    }

    /// Five-point Laplacian on the interior; zero on the boundary ring.
    pub fn laplacian(&self, f: &DVector<f64>) -> DVector<f64> {
        let (nx, ny) = (self.params.nx, self.params.ny);
        let (cx, cy) = (1.0 / (self.hx * self.hx), 1.0 / (self.hy * self.hy));
        let mut out = DVector::zeros(nx * ny);
        for j in 1..ny - 1 {
            for i in 1..nx - 1 {
                let k = j * nx + i;
                out[k] = cx * (f[k + 1] - 2.0 * f[k] + f[k - 1]) + cy * (f[k + nx] - 2.0 * f[k] + f[k - nx]);
            }
        }
        out
    }

    /// Arakawa's nine-point `ψ_x ω_y − ψ_y ω_x` on interior nodes.
    pub fn arakawa(&self, psi: &DVector<f64>, omega: &DVector<f64>) -> DVector<f64> {
        let (nx, ny) = (self.params.nx, self.params.ny);
        let c = 1.0 / (12.0 * self.hx * self.hy);
        let (p, w) = (psi.as_slice(), omega.as_slice());
        let mut out = DVector::zeros(nx * ny);
        for j in 1..ny - 1 {
            for i in 1..nx - 1 {
                let k = j * nx + i;
                let (e, wst, n, s) = (k + 1, k - 1, k + nx, k - nx);
                let (ne, nw, se, sw) = (n + 1, n - 1, s + 1, s - 1);
                let jpp = (p[e] - p[wst]) * (w[n] - w[s]) - (p[n] - p[s]) * (w[e] - w[wst]);
                let jpx = p[e] * (w[ne] - w[se]) - p[wst] * (w[nw] - w[sw]) - p[n] * (w[ne] - w[nw])
                    + p[s] * (w[se] - w[sw]);
                let jxp = p[ne] * (w[n] - w[e]) - p[sw] * (w[wst] - w[s]) - p[nw] * (w[n] - w[wst])
                    + p[se] * (w[e] - w[s]);
                out[k] = c * (jpp + jpx + jxp);
            }
        }
        out
    }

    /// Vorticity tendency.
    pub fn rhs(&self, omega: &DVector<f64>) -> DVector<f64> {
        let psi = self.poisson_solve(omega);
        let mut out = self.arakawa(&psi, omega);
        out += self.laplacian(omega) / self.params.reynolds;
        let (nx, ny) = (self.params.nx, self.params.ny);
        let inv_ro = 1.0 / self.params.rossby;
        let cx = 1.0 / (2.0 * self.hx);
        for j in 1..ny - 1 {
            for i in 1..nx - 1 {
                let k = j * nx + i;
                out[k] += inv_ro * ((psi[k + 1] - psi[k - 1]) * cx + self.forcing[k]);
            }
        }
        out
    }

    /// Three-stage strong-stability-preserving Runge–Kutta step.
    pub fn rk3_step(&self, omega: &DVector<f64>, dt: f64) -> DVector<f64> {
        let w1 = omega + self.rhs(omega) * dt;
        let w2 = omega * 0.75 + (&w1 + self.rhs(&w1) * dt) * 0.25;
        omega / 3.0 + (&w2 + self.rhs(&w2) * dt) * (2.0 / 3.0)
    }

    /// `(u, v) = (ψ_y, −ψ_x)` stacked as `[u; v]`.
    pub fn velocities_from_psi(&self, psi: &DVector<f64>) -> StateVector {
        let n = self.nodes();
        let mut out = DVector::zeros(2 * n);
        self.dy.mul_slice(psi.as_slice(), &mut out.as_mut_slice()[..n]);
        self.dx.mul_slice(psi.as_slice(), &mut out.as_mut_slice()[n..]);
        for v in &mut out.as_mut_slice()[n..] {
            *v = -*v;
        }
        out
    }

    /// `v_x − u_y` at every node.
    pub fn curl(&self, state: &StateVector) -> DVector<f64> {
        let n = self.nodes();
        let (u, v) = state.as_slice().split_at(n);
        let mut out = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        self.dx.mul_slice(v, &mut out);
        self.dy.mul_slice(u, &mut tmp);
        DVector::from_iterator(n, out.iter().zip(&tmp).map(|(a, b)| a - b))
    }

    /// `u_x + v_y` at every node.
    pub fn divergence(&self, state: &StateVector) -> DVector<f64> {
        let n = self.nodes();
        let (u, v) = state.as_slice().split_at(n);
        let mut out = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        self.dx.mul_slice(u, &mut out);
        self.dy.mul_slice(v, &mut tmp);
        DVector::from_iterator(n, out.iter().zip(&tmp).map(|(a, b)| a + b))
    }

    /// Model vorticity: the curl on interior nodes, zero on the boundary.
    pub fn vorticity_from_velocities(&self, state: &StateVector) -> DVector<f64> {
        let w = self.curl(state);
        self.embed(&self.interior(w.as_slice()))
    }

    pub fn velocities_from_vorticity(&self, omega: &DVector<f64>) -> StateVector {
        self.velocities_from_psi(&self.poisson_solve(omega))
    }

    /// `½ ∫ (u² + v²)`.
    pub fn energy(&self, state: &StateVector) -> f64 {
        0.5 * self.hx * self.hy * state.norm_squared()
    }

    /// `½ ∫ (v_x − u_y)²`.
    pub fn enstrophy(&self, state: &StateVector) -> f64 {
        0.5 * self.hx * self.hy * self.curl(state).norm_squared()
    }

    /// Smooth random vorticity: sine modes up to `init_modes` with `1/(k² + l²)`
    /// spectral decay, scaled to RMS `amplitude`.
    pub fn smooth_random_vorticity(&self, key: &[u64], amplitude: f64) -> DVector<f64> {
        let (nx, ny) = (self.params.nx, self.params.ny);
        let m = self.params.init_modes;
        let a = rng::standard_normal(key, m * m);
        let mut w = DVector::<f64>::zeros(nx * ny);
        let sx: Vec<Vec<f64>> = (1..=m)
            .map(|k| (0..nx).map(|i| (PI * k as f64 * i as f64 * self.hx).sin()).collect())
            .collect();
        let sy: Vec<Vec<f64>> = (1..=m)
            .map(|l| (0..ny).map(|j| (0.5 * PI * l as f64 * j as f64 * self.hy).sin()).collect())
            .collect();
        for k in 0..m {
            for l in 0..m {
                let c = a[k * m + l] / ((k + 1).pow(2) + (l + 1).pow(2)) as f64;
                for j in 1..ny - 1 {
                    for i in 1..nx - 1 {
                        w[j * nx + i] += c * sx[k][i] * sy[l][j];
                    }
                }
            }
        }
        let rms: f64 = (w.norm_squared() / w.len() as f64).sqrt();
        if rms > 0.0 {
            w *= amplitude / rms;
        }
        w
    }

    /// Velocity state of a random vorticity field advanced `spinup_steps`.
    pub fn spun_up_truth(&self, seed: u64, spinup_steps: usize) -> StateVector {
        let mut w = self.smooth_random_vorticity(&[rng::tag::TRUTH, seed], self.params.init_amplitude);
        for _ in 0..spinup_steps {
            w = self.rk3_step(&w, self.params.dt);
        }
        self.velocities_from_vorticity(&w)
    }

    /// Members from smooth vorticity perturbations of `truth`.
    pub fn perturbed_members(&self, truth: &StateVector, n_e: usize, seed: u64) -> Vec<StateVector> {
        let w = self.vorticity_from_velocities(truth);
        let rms = (w.norm_squared() / w.len() as f64).sqrt();
        (0..n_e)
            .map(|e| {
                let dw = self.smooth_random_vorticity(
                    &[rng::tag::ENSEMBLE_INIT, seed, e as u64],
                    self.params.member_perturbation * rms,
                );
                self.velocities_from_vorticity(&(&w + dw))
            })
            .collect()
    }

    /// The constant divergence block `[D_x  D_y]`, factored once.
    pub fn divergence_block(&self) -> Result<Arc<LinearBlock>> {
        if let Some(b) = self.divergence.get() {
            return Ok(b.clone());
        }
        let n = self.nodes();
        let mut t = Vec::with_capacity(2 * self.dx.nnz());
        for r in 0..n {
            t.extend(self.dx.row(r).map(|(c, v)| (r, c, v)));
            t.extend(self.dy.row(r).map(|(c, v)| (r, n + c, v)));
        }
        let block = Arc::new(LinearBlock::new(CsrMatrix::from_triplets(n, 2 * n, &t))?);
        Ok(self.divergence.get_or_init(|| block).clone())
    }

    /// Divergence, energy and enstrophy constraints anchored at `forecast`.
    pub fn constraints(self: &Arc<Self>, forecast: &StateVector) -> Result<NsConstraints> {
        check_dim("ns forecast member", 2 * self.nodes(), forecast.len())?;
        Ok(NsConstraints {
            model: self.clone(),
            block: self.divergence_block()?,
            energy: self.energy(forecast),
            enstrophy: self.enstrophy(forecast),
        })
    }

    pub fn member_constraints(self: &Arc<Self>, forecast: &Ensemble) -> Result<MemberConstraints> {
        let list = forecast
            .members()
            .map(|m| Ok(Arc::new(self.constraints(&m)?) as Arc<dyn ConstraintSystem>))
            .collect::<Result<Vec<_>>>()?;
        Ok(MemberConstraints::PerMember(list))
    }

    /// Node indices of the observation lattice along one axis.
    fn lattice(n: usize, k: usize) -> Vec<usize> {
        (0..k)
            .map(|i| (((i + 1) * (n - 1)) as f64 / (k + 1) as f64).round() as usize)
            .collect()
    }

    pub fn observed_nodes(&self) -> Vec<usize> {
        let (nx, ny) = (self.params.nx, self.params.ny);
        let k = self.params.obs_per_dim;
        let xs = Self::lattice(nx, k);
        let ys = Self::lattice(ny, k);
        ys.iter().flat_map(|&j| xs.iter().map(move |&i| j * nx + i)).collect()
    }

    /// `u` then `v` at the observed nodes.
    pub fn observation_operator(&self) -> LinearObservation {
        let n = self.nodes();
        let nodes = self.observed_nodes();
        let idx: Vec<usize> = nodes.iter().copied().chain(nodes.iter().map(|k| k + n)).collect();
        LinearObservation::selection(2 * n, &idx)
    }

    pub fn localization(&self, radius: f64) -> LocalizationConfig {
        let n = self.nodes();
        let nodes = self.observed_nodes();
        LocalizationConfig {
            radius,
            state_coords: (0..2 * n).map(|k| self.node_coords(k % n)).collect(),
            obs_coords: nodes.iter().chain(nodes.iter()).map(|&k| self.node_coords(k)).collect(),
            periodic: [None, None],
        }
    }

    /// Five-point Laplacian on the full node grid with a zero ghost ring.
    pub fn node_laplacian(&self) -> DirichletLaplacian2d {
        DirichletLaplacian2d::new(self.params.nx, self.params.ny, self.hx, self.hy)
    }
}

impl DynamicalModel for QgModel {
    fn state_dim(&self) -> usize {
        2 * self.nodes()
    }

    fn time_step(&self) -> f64 {
        self.params.dt
    }

    fn step(&self, x: &StateVector) -> Result<StateVector> {
        self.advance(x, 1)
    }

    /// Converts to vorticity once, takes `n` RK3 steps and converts back.
    fn advance(&self, x: &StateVector, n: usize) -> Result<StateVector> {
        check_dim("ns state", 2 * self.nodes(), x.len())?;
        let mut w = self.vorticity_from_velocities(x);
        for _ in 0..n {
            w = self.rk3_step(&w, self.params.dt);
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "vorticity integration",
                member: 0,
            });
        }
        Ok(self.velocities_from_vorticity(&w))
    }
}

/// `[u_x + v_y (every node); E(x) − E(x_f); Z(x) − Z(x_f)]`.
#[derive(Debug)]
pub struct NsConstraints {
    model: Arc<QgModel>,
    block: Arc<LinearBlock>,
    energy: f64,
    enstrophy: f64,
}

impl ConstraintSystem for NsConstraints {
    fn n_c(&self) -> usize {
        self.model.nodes() + 2
    }

    fn state_dim(&self) -> usize {
        2 * self.model.nodes()
    }

    fn eval(&self, x: &StateVector) -> DVector<f64> {
        let n = self.model.nodes();
        let div = self.model.divergence(x);
        let mut g = DVector::zeros(n + 2);
        g.rows_mut(0, n).copy_from(&div);
        g[n] = self.model.energy(x) - self.energy;
        g[n + 1] = self.model.enstrophy(x) - self.enstrophy;
        g
    }

    fn jacobian(&self, x: &StateVector) -> Jacobian {
        let m = &self.model;
        let n = m.nodes();
        let area = m.hx * m.hy;
        let w = m.curl(x);
        let mut c = DMatrix::zeros(2, 2 * n);
        for k in 0..2 * n {
            c[(0, k)] = area * x[k];
        }
        let wu = m.dy.tr_mul_vec(&w);
        let wv = m.dx.tr_mul_vec(&w);
        for k in 0..n {
            c[(1, k)] = -area * wu[k];
            c[(1, n + k)] = area * wv[k];
        }
        Jacobian::Structured {
            linear: self.block.clone(),
            nonlinear: c,
        }
    }

    fn kind(&self) -> ConstraintKind {
        ConstraintKind::ForecastRelative
    }

    fn row_magnitudes(&self, x: &StateVector) -> DVector<f64> {
        let n = self.model.nodes();
        let b = self.block.matrix();
        let mut out = DVector::zeros(n + 2);
        for r in 0..n {
            out[r] = b.row(r).map(|(c, v)| (v * x[c]).abs()).sum();
        }
        out[n] = self.model.energy(x) + self.energy.abs();
        out[n + 1] = self.model.enstrophy(x) + self.enstrophy.abs();
        out
    }
}
