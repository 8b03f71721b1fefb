//! Variational Fokker–Planck particle flow under Gaussian assumptions, with
//! Baumgarte-type stabilization and index-2 differential-algebraic
//! constraint handling.
//!
//! A flow moves the forecast ensemble through pseudo-time `τ` by
//! `dx = F(x) dτ + σ dW`. The drift
//! `F = ∇log P_a − ∇log P_τ + (σσᵀ/2) ∇log P_τ` is evaluated with Gaussian
//! densities whose means and precisions come from the forecast ensemble and
//! from the current intermediate ensemble.

mod diffusion;

pub use diffusion::DiffusionOperator;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::constraints::{
    pseudo_inverse_apply, project_to_manifold, tangent_project, ConstraintSystem, MemberConstraints,
    ProjectionConfig,
};
use crate::ensemble::{Ensemble, PrecisionModel, PrecisionOperator, StateVector};
use crate::error::{check_dim, Error, Result};
use crate::observation::ObservationModel;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    EulerMaruyama,
    RosenbrockEm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DaeScheme {
    /// Predictor, then projection along `Gᵀ(x₀)`.
    AnchorAtX0,
    /// Predictor, then projection along `Gᵀ(x̃₁)`.
    EvolveProject,
    /// Rosenbrock predictor, then projection along `Gᵀ(x̃₁)`.
    RosenbrockProject,
    /// Increment projected onto the tangent space at `x₀`, then projection
    /// along `Gᵀ(x₀)`.
    Eliminated,
}

impl DaeScheme {
    pub fn name(self) -> &'static str {
        match self {
            DaeScheme::AnchorAtX0 => "anchor-at-x0",
            DaeScheme::EvolveProject => "evolve-project",
            DaeScheme::RosenbrockProject => "rosenbrock-project",
            DaeScheme::Eliminated => "eliminated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMethod {
    Vfp,
    VfpStab,
    VfpDae,
}

impl FlowMethod {
    pub fn name(self) -> &'static str {
        match self {
            FlowMethod::Vfp => "VFP",
            FlowMethod::VfpStab => "VFPSTAB",
            FlowMethod::VfpDae => "VFPDAE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub pseudo_step: f64,
    pub stop_tol: f64,
    pub max_steps: usize,
    #[serde(default = "default_integrator")]
    pub integrator: Integrator,
    #[serde(default = "default_scheme")]
    pub dae_scheme: DaeScheme,
    #[serde(default)]
    pub gamma: f64,
    /// Standard deviation multiplier of per-member perturbed observations.
    #[serde(default)]
    pub perturbed_obs: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub projection: ProjectionConfig,
}

fn default_integrator() -> Integrator {
    Integrator::EulerMaruyama
}

fn default_scheme() -> DaeScheme {
    DaeScheme::EvolveProject
}

impl FlowConfig {
    pub fn new(pseudo_step: f64, stop_tol: f64, max_steps: usize) -> Self {
        Self {
            pseudo_step,
            stop_tol,
            max_steps,
            integrator: default_integrator(),
            dae_scheme: default_scheme(),
            gamma: 0.0,
            perturbed_obs: None,
            seed: 0,
            projection: ProjectionConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.pseudo_step > 0.0 && self.pseudo_step.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "pseudo_step",
                value: self.pseudo_step,
                reason: "pseudo-time step must be positive",
            });
        }
        if !(self.stop_tol > 0.0) {
            return Err(Error::InvalidParameter {
                name: "stop_tol",
                value: self.stop_tol,
                reason: "stopping tolerance must be positive",
            });
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "gamma",
                value: self.gamma,
                reason: "stabilization must be non-negative",
            });
        }
        Ok(())
    }
}

/// Gaussian forecast and intermediate densities plus the observations.
#[derive(Debug, Clone)]
pub struct GaussianFlowContext {
    pub xf_mean: StateVector,
    pub pf_inv: PrecisionOperator,
    pub xtau_mean: StateVector,
    pub ptau_inv: PrecisionOperator,
    pub obs: ObservationModel,
    /// Per-member perturbed data, replacing `obs.y` when present.
    pub y_members: Option<Vec<DVector<f64>>>,
}

impl GaussianFlowContext {
    fn y(&self, member: usize) -> &DVector<f64> {
        match &self.y_members {
            Some(v) => &v[member],
            None => &self.obs.y,
        }
    }
}

/// `(∇log P_τ, ∇log P_a)` at `x`.
pub fn gaussian_log_gradients(
    x: &StateVector,
    ctx: &GaussianFlowContext,
    member: usize,
) -> Result<(StateVector, StateVector)> {
    check_dim("flow state", ctx.xf_mean.len(), x.len())?;
    let grad_tau = -ctx.ptau_inv.apply(&(x - &ctx.xtau_mean))?;
    let innov = ctx.obs.operator.apply(x) - ctx.y(member);
    let grad_a = -ctx.pf_inv.apply(&(x - &ctx.xf_mean))? - ctx.obs.operator.adjoint(x, &ctx.obs.r.solve(&innov));
    Ok((grad_tau, grad_a))
}

/// `F = (∇log P_a − ∇log P_τ) + (σσᵀ/2) ∇log P_τ`.
pub fn optimal_drift(
    x: &StateVector,
    ctx: &GaussianFlowContext,
    diff: &DiffusionOperator,
    member: usize,
) -> Result<StateVector> {
    let (gt, ga) = gaussian_log_gradients(x, ctx, member)?;
    let mut f = ga - &gt;
    if !diff.is_zero() {
        f += diff.half_quadratic(&gt);
    }
    Ok(f)
}

/// `F(x) − γ Gᵀ (G Gᵀ)⁻¹ g(x)`.
pub fn vfpstab_drift(
    x: &StateVector,
    ctx: &GaussianFlowContext,
    diff: &DiffusionOperator,
    cs: &dyn ConstraintSystem,
    gamma: f64,
    member: usize,
) -> Result<StateVector> {
    stabilize(optimal_drift(x, ctx, diff, member)?, x, cs, gamma)
}

fn stabilize(mut f: StateVector, x: &StateVector, cs: &dyn ConstraintSystem, gamma: f64) -> Result<StateVector> {
    if gamma == 0.0 {
        return Ok(f);
    }
    let g = cs.eval(x);
    if g.iter().all(|&v| v == 0.0) {
        return Ok(f);
    }
    f -= pseudo_inverse_apply(&cs.jacobian(x), &g)? * gamma;
    Ok(f)
}

/// A drift field over pseudo-time.
pub trait DriftField {
    fn state_dim(&self) -> usize;
    fn drift(&self, x: &StateVector, member: usize) -> Result<StateVector>;
    /// Dense drift Jacobian at `x` for the Rosenbrock predictor, with the
    /// intermediate density frozen.
    fn jacobian(&self, x: &StateVector) -> Result<DMatrix<f64>>;

    /// Jacobian of the ensemble-mean drift, where `x̄_τ` moves with the
    /// members. Defaults to [`DriftField::jacobian`].
    fn mean_jacobian(&self, x: &StateVector) -> Result<DMatrix<f64>> {
        self.jacobian(x)
    }
}

/// The Gaussian optimal drift, optionally stabilized.
pub struct GaussianDrift<'a> {
    pub ctx: &'a GaussianFlowContext,
    pub diff: &'a DiffusionOperator,
    pub stabilization: Option<(&'a MemberConstraints, f64)>,
}

impl DriftField for GaussianDrift<'_> {
    fn state_dim(&self) -> usize {
        self.ctx.xf_mean.len()
    }

    fn drift(&self, x: &StateVector, member: usize) -> Result<StateVector> {
        let f = optimal_drift(x, self.ctx, self.diff, member)?;
        match self.stabilization {
            Some((cs, gamma)) => stabilize(f, x, cs.get(member).as_ref(), gamma),
            None => Ok(f),
        }
    }

    /// `−P_f⁻¹ − HᵀR⁻¹H + (I − σσᵀ/2) P_τ⁻¹`, with `H` linearized at `x`
    /// and the stabilization term left out.
    fn jacobian(&self, x: &StateVector) -> Result<DMatrix<f64>> {
        let n = self.state_dim();
        let h = self.ctx.obs.operator.jacobian_dense(x);
        let rinv_h = self.ctx.obs.r.solve_matrix(&h);
        let d = DMatrix::identity(n, n) - self.diff.half_quadratic_dense();
        let jac = d * self.ctx.ptau_inv.to_dense() - self.ctx.pf_inv.to_dense() - h.transpose() * rinv_h;
        Ok(jac)
    }

    /// `−P_f⁻¹ − HᵀR⁻¹H`: the `P_τ` terms cancel at the mean.
    fn mean_jacobian(&self, x: &StateVector) -> Result<DMatrix<f64>> {
        let h = self.ctx.obs.operator.jacobian_dense(x);
        let rinv_h = self.ctx.obs.r.solve_matrix(&h);
        Ok(-self.ctx.pf_inv.to_dense() - h.transpose() * rinv_h)
    }
}

/// Factorized `I − h F_x`.
pub struct RosenbrockOperator {
    lu: LU<f64, Dyn, Dyn>,
    h: f64,
}

impl RosenbrockOperator {
    pub fn new(fx: &DMatrix<f64>, h: f64) -> Result<Self> {
        let n = fx.nrows();
        let m = DMatrix::identity(n, n) - fx * h;
        let lu = m.lu();
        if !lu.is_invertible() {
            return Err(Error::SingularSystem {
                context: "Rosenbrock matrix I − h F_x",
                hint: "reduce the pseudo-time step",
            });
        }
        Ok(Self { lu, h })
    }

    /// `(I − h F_x)⁻¹ f`.
    pub fn solve(&self, f: &StateVector) -> Result<StateVector> {
        self.lu.solve(f).ok_or(Error::SingularSystem {
            context: "Rosenbrock matrix I − h F_x",
            hint: "reduce the pseudo-time step",
        })
    }

    /// `x₀ + h (I − h F_x)⁻¹ F(x₀) + noise`.
    pub fn predict(&self, x0: &StateVector, f0: &StateVector, noise: &StateVector) -> Result<StateVector> {
        Ok(x0 + self.solve(f0)? * self.h + noise)
    }
}

/// For a symmetric Jacobian, growing modes are reflected to `−|λ|`. A
/// mode then grows by `1 + hλ/(1 + hλ)` per step: first-order consistent,
/// bounded by 2, and `I − hJ` never becomes singular. Non-symmetric input is
/// returned as is.
fn reflect_growing_modes(j: DMatrix<f64>) -> DMatrix<f64> {
    let scale = j.amax();
    if scale == 0.0 || (&j - j.transpose()).amax() > 1e-12 * scale {
        return j;
    }
    let eig = j.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l <= 0.0) {
        return j;
    }
    let reflected = eig.eigenvalues.map(|l| -l.abs());
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&reflected) * v.transpose()
}

/// Linearly implicit step for the coupled ensemble. Member drifts depend
/// on each other through `x̄_τ`, so the Jacobian of the ensemble system has
/// two distinct blocks: the mean direction and the deviations from it.
/// Each member's drift is split the same way before the solve.
pub struct EnsembleRosenbrock {
    mean: RosenbrockOperator,
    anomaly: RosenbrockOperator,
}

impl EnsembleRosenbrock {
    pub fn new(drift: &dyn DriftField, x: &StateVector, h: f64) -> Result<Self> {
        Ok(Self {
            mean: RosenbrockOperator::new(&drift.mean_jacobian(x)?, h)?,
            anomaly: RosenbrockOperator::new(&reflect_growing_modes(drift.jacobian(x)?), h)?,
        })
    }

    /// `h (I − h 𝓕_x)⁻¹ F` for every member.
    pub fn increments(&self, drifts: &[StateVector]) -> Result<Vec<StateVector>> {
        let Some(first) = drifts.first() else {
            return Ok(Vec::new());
        };
        let mut fbar = DVector::zeros(first.len());
        for f in drifts {
            fbar += f;
        }
        fbar /= drifts.len() as f64;
        let kbar = self.mean.solve(&fbar)?;
        drifts
            .iter()
            .map(|f| Ok((self.anomaly.solve(&(f - &fbar))? + &kbar) * self.mean.h))
            .collect()
    }
}

/// `x̃₁ = x₀ + h (I − h F_x)⁻¹ F(x₀) + √h σ ξ`.
pub fn rosenbrock_em_predictor(
    x0: &StateVector,
    drift: &dyn DriftField,
    diff: &DiffusionOperator,
    h: f64,
    xi: &DVector<f64>,
    member: usize,
) -> Result<StateVector> {
    let op = RosenbrockOperator::new(&drift.jacobian(x0)?, h)?;
    let noise = diff.apply(xi) * h.sqrt();
    op.predict(x0, &drift.drift(x0, member)?, &noise)
}

/// Deterministic Wiener increments keyed by `(seed, cycle, step, member)`.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSource {
    pub seed: u64,
    pub cycle: u64,
}

impl NoiseSource {
    pub fn draw(&self, step: usize, member: usize, n: usize) -> DVector<f64> {
        rng::standard_normal(&[rng::tag::FLOW, self.seed, self.cycle, step as u64, member as u64], n)
    }
}

fn check_finite(x: &StateVector, context: &'static str, member: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context, member })
    }
}

fn em_predict(
    x0: &StateVector,
    f0: &StateVector,
    diff: &DiffusionOperator,
    h: f64,
    xi: &DVector<f64>,
) -> StateVector {
    let mut x = x0 + f0 * h;
    if !diff.is_zero() {
        x += diff.apply(xi) * h.sqrt();
    }
    x
}

/// One Euler–Maruyama step `x ← x + h F + √h σ ξ` for every member.
pub fn vfp_step_em(
    ens: &Ensemble,
    drift: &dyn DriftField,
    diff: &DiffusionOperator,
    h: f64,
    noise: &NoiseSource,
    step: usize,
) -> Result<Ensemble> {
    let n = ens.state_dim();
    let mut cols = Vec::with_capacity(ens.size());
    for (e, x) in ens.members().enumerate() {
        let f = drift.drift(&x, e)?;
        check_finite(&f, "flow drift", e)?;
        let xi = noise.draw(step, e, n);
        cols.push(em_predict(&x, &f, diff, h, &xi));
    }
    Ensemble::from_columns(&cols)
}

fn unconstrained_step(
    ens: &Ensemble,
    drift: &dyn DriftField,
    diff: &DiffusionOperator,
    cfg: &FlowConfig,
    noise: &NoiseSource,
    step: usize,
    rosen: Option<&EnsembleRosenbrock>,
) -> Result<Ensemble> {
    let Some(op) = rosen else {
        return vfp_step_em(ens, drift, diff, cfg.pseudo_step, noise, step);
    };
    let n = ens.state_dim();
    let h = cfg.pseudo_step;
    let members: Vec<StateVector> = ens.members().collect();
    let drifts = member_drifts(&members, drift)?;
    let cols = members
        .iter()
        .zip(op.increments(&drifts)?)
        .enumerate()
        .map(|(e, (x, k))| x + k + diff.apply(&noise.draw(step, e, n)) * h.sqrt())
        .collect::<Vec<_>>();
    Ensemble::from_columns(&cols)
}

fn member_drifts(members: &[StateVector], drift: &dyn DriftField) -> Result<Vec<StateVector>> {
    members
        .iter()
        .enumerate()
        .map(|(e, x)| {
            let f = drift.drift(x, e)?;
            check_finite(&f, "flow drift", e)?;
            Ok(f)
        })
        .collect()
}

/// One constrained pseudo-time step; every output member lies on its
/// manifold.
#[allow(clippy::too_many_arguments)]
pub fn vfpdae_step(
    ens: &Ensemble,
    drift: &dyn DriftField,
    diff: &DiffusionOperator,
    cs: &MemberConstraints,
    cfg: &FlowConfig,
    noise: &NoiseSource,
    step: usize,
    rosen: Option<&EnsembleRosenbrock>,
) -> Result<Ensemble> {
    let scheme = cfg.dae_scheme;
    let n = ens.state_dim();
    let h = cfg.pseudo_step;
    let wrap = |member: usize| move |source: Error| Error::Scheme {
        scheme: scheme.name(),
        member,
        source: Box::new(source),
    };
    let members: Vec<StateVector> = ens.members().collect();
    let drifts = member_drifts(&members, drift)?;
    let use_rosen = matches!(scheme, DaeScheme::RosenbrockProject)
        || (cfg.integrator == Integrator::RosenbrockEm && rosen.is_some());
    let increments = if use_rosen {
        let built;
        let op = match rosen {
            Some(op) => op,
            None => {
                built = EnsembleRosenbrock::new(drift, &ens.mean(), h)?;
                &built
            }
        };
        Some(op.increments(&drifts)?)
    } else {
        None
    };
    let mut cols = Vec::with_capacity(ens.size());
    for (e, (x0, f)) in members.into_iter().zip(&drifts).enumerate() {
        let c = cs.get(e).as_ref();
        let xi = noise.draw(step, e, n);
        let predicted = match &increments {
            Some(k) => &x0 + &k[e] + diff.apply(&xi) * h.sqrt(),
            None => em_predict(&x0, f, diff, h, &xi),
        };
        let (x1, anchor) = match scheme {
            DaeScheme::AnchorAtX0 => (predicted, x0.clone()),
            DaeScheme::EvolveProject | DaeScheme::RosenbrockProject => (predicted.clone(), predicted),
            DaeScheme::Eliminated => {
                let inc = tangent_project(&c.jacobian(&x0), &(predicted - &x0)).map_err(wrap(e))?;
                (&x0 + inc, x0.clone())
            }
        };
        let p = project_to_manifold(&x1, c, &anchor, &cfg.projection).map_err(wrap(e))?;
        check_finite(&p.x, "projected member", e)?;
        cols.push(p.x);
    }
    Ensemble::from_columns(&cols)
}

fn max_violation(ens: &Ensemble, cs: &MemberConstraints) -> f64 {
    ens.members()
        .enumerate()
        .map(|(e, x)| cs.get(e).eval(&x).amax())
        .fold(0.0, f64::max)
}

/// Everything a flow analysis needs besides its configuration.
#[derive(Debug, Clone, Copy)]
pub struct FlowProblem<'a> {
    pub forecast: &'a Ensemble,
    pub obs: &'a ObservationModel,
    pub constraints: Option<&'a MemberConstraints>,
    pub precision: &'a PrecisionModel,
    pub diffusion: &'a DiffusionOperator,
    pub cycle: u64,
}

#[derive(Debug, Clone)]
pub struct FlowOutcome {
    pub ensemble: Ensemble,
    pub steps: usize,
    pub converged: bool,
    /// Largest `|g|` over members after each pseudo-step.
    pub max_abs_g: Vec<f64>,
}

/// Perturbed data `y + scale · R^{1/2} ξ_e`, drawn once per analysis.
pub fn perturbed_observations(obs: &ObservationModel, scale: f64, ne: usize, seed: u64, cycle: u64) -> Vec<DVector<f64>> {
    (0..ne)
        .map(|e| {
            let xi = rng::standard_normal(&[rng::tag::PERTURBED_OBS, seed, cycle, e as u64], obs.obs_dim());
            &obs.y + obs.r.sqrt_mul(&xi) * scale
        })
        .collect()
}

/// Runs a flow from `initial` (the forecast when `None`) until the
/// ensemble mean moves less than `stop_tol` in one step or `max_steps`
/// steps have been taken.
pub fn run_flow(
    problem: FlowProblem<'_>,
    method: FlowMethod,
    cfg: &FlowConfig,
    initial: Option<Ensemble>,
) -> Result<FlowOutcome> {
    cfg.validate()?;
    let prior = problem.forecast;
    check_dim("flow observation operator", prior.state_dim(), problem.obs.state_dim())?;
    check_dim("flow diffusion", prior.state_dim(), problem.diffusion.dim())?;
    let cs = match method {
        FlowMethod::Vfp => problem.constraints,
        _ => Some(problem.constraints.ok_or_else(|| {
            Error::Unsupported(format!("{} requires a constraint system", method.name()))
        })?),
    };
    let mut ens = initial.unwrap_or_else(|| prior.clone());
    check_dim("flow initial ensemble size", prior.size(), ens.size())?;
    let noise = NoiseSource {
        seed: cfg.seed,
        cycle: problem.cycle,
    };

    if method == FlowMethod::VfpDae {
        let cs = cs.expect("checked above");
        let mut cols = Vec::with_capacity(ens.size());
        for (e, x) in ens.members().enumerate() {
            let c = cs.get(e).as_ref();
            let p = project_to_manifold(&x, c, &x, &cfg.projection).map_err(|s| Error::member(e, s))?;
            cols.push(p.x);
        }
        ens = Ensemble::from_columns(&cols)?;
    }

    let y_members = cfg
        .perturbed_obs
        .map(|s| perturbed_observations(problem.obs, s, prior.size(), cfg.seed, problem.cycle));
    let mut ctx = GaussianFlowContext {
        xf_mean: prior.mean(),
        pf_inv: problem.precision.build(prior)?,
        xtau_mean: ens.mean(),
        ptau_inv: problem.precision.build(&ens)?,
        obs: problem.obs.clone(),
        y_members,
    };

    let mut max_abs_g = Vec::new();
    let mut converged = false;
    let mut steps = 0;
    for step in 0..cfg.max_steps {
        if step > 0 {
            ctx.xtau_mean = ens.mean();
            ctx.ptau_inv = problem.precision.build(&ens)?;
        }
        let stabilization = match method {
            FlowMethod::VfpStab => Some((cs.expect("checked above"), cfg.gamma)),
            _ => None,
        };
        let drift = GaussianDrift {
            ctx: &ctx,
            diff: problem.diffusion,
            stabilization,
        };
        let want_rosen = cfg.integrator == Integrator::RosenbrockEm
            || (method == FlowMethod::VfpDae && cfg.dae_scheme == DaeScheme::RosenbrockProject);
        let rosen = if want_rosen {
            Some(EnsembleRosenbrock::new(&drift, &ctx.xtau_mean, cfg.pseudo_step)?)
        } else {
            None
        };
        let next = match method {
            FlowMethod::VfpDae => vfpdae_step(
                &ens,
                &drift,
                problem.diffusion,
                cs.expect("checked above"),
                cfg,
                &noise,
                step,
                rosen.as_ref(),
            )?,
            _ => unconstrained_step(&ens, &drift, problem.diffusion, cfg, &noise, step, rosen.as_ref())?,
        };
        let change = (next.mean() - &ctx.xtau_mean).amax();
        ens = next;
        steps = step + 1;
        if let Some(cs) = cs {
            max_abs_g.push(max_violation(&ens, cs));
        }
        if change < cfg.stop_tol {
            converged = true;
            break;
        }
    }
    Ok(FlowOutcome {
        ensemble: ens,
        steps,
        converged,
        max_abs_g,
    })
}

#[cfg(test)]
mod tests;
