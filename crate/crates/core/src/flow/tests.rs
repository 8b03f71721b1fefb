use std::sync::Arc;

use super::*;
use crate::constraints::{Jacobian, LinearConstraints};
use crate::ensemble::CovarianceEstimate;
use crate::observation::{LinearObservation, ObsCovariance};

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn scalar_precision(var: f64) -> PrecisionOperator {
    PrecisionOperator::from_covariance(&CovarianceEstimate::new(DMatrix::from_element(1, 1, var)).unwrap()).unwrap()
}

fn scalar_obs(y: f64, r: f64) -> ObservationModel {
    ObservationModel::new(
        Arc::new(LinearObservation::identity(1)),
        v(&[y]),
        ObsCovariance::scaled_identity(1, r).unwrap(),
    )
    .unwrap()
}

fn scalar_ctx(xf: f64, pf: f64, xt: f64, pt: f64, y: f64, r: f64) -> GaussianFlowContext {
    GaussianFlowContext {
        xf_mean: v(&[xf]),
        pf_inv: scalar_precision(pf),
        xtau_mean: v(&[xt]),
        ptau_inv: scalar_precision(pt),
        obs: scalar_obs(y, r),
        y_members: None,
    }
}

#[test]
fn log_gradient_examples() {
    let ctx = scalar_ctx(0.0, 1.0, 0.5, 2.0, 2.0, 1.0);
    let (gt, _) = gaussian_log_gradients(&v(&[0.5]), &ctx, 0).unwrap();
    assert_eq!(gt, v(&[0.0]));
    let ctx = scalar_ctx(1.5, 1.0, 0.0, 1.0, 1.5, 1.0);
    let (_, ga) = gaussian_log_gradients(&v(&[1.5]), &ctx, 0).unwrap();
    assert_eq!(ga, v(&[0.0]));
    let ctx = scalar_ctx(0.0, 1.0, 0.0, 1.0, 2.0, 1.0);
    let (_, ga) = gaussian_log_gradients(&v(&[0.0]), &ctx, 0).unwrap();
    assert!((ga[0] - 2.0).abs() < 1e-15);
}

#[test]
fn optimal_drift_examples() {
    let zero = DiffusionOperator::Zero(1);
    let ctx = scalar_ctx(2.0, 1.0, 2.0, 1.0, 2.0, 1.0);
    assert_eq!(optimal_drift(&v(&[2.0]), &ctx, &zero, 0).unwrap(), v(&[0.0]));

    // P_τ equal to the posterior: P_a⁻¹ = 2, posterior mean 1.
    let ctx = scalar_ctx(0.0, 1.0, 1.0, 0.5, 2.0, 1.0);
    for x in [-3.0, 0.0, 0.7, 4.2] {
        assert!(optimal_drift(&v(&[x]), &ctx, &zero, 0).unwrap()[0].abs() < 1e-12);
    }

    // (grad_a − grad_τ) + 0.5 grad_τ with grad_a = 0, grad_τ = −1.
    let ctx = scalar_ctx(0.0, 1.0, 0.0, 1.0, 2.0, 1.0);
    let diff = DiffusionOperator::Diagonal(v(&[1.0]));
    let f = optimal_drift(&v(&[1.0]), &ctx, &diff, 0).unwrap();
    assert!((f[0] - 0.5).abs() < 1e-15);
}

/// Finite differences of the assembled Gaussian log densities.
#[test]
fn drift_matches_density_finite_differences() {
    let pf = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    let pt = DMatrix::from_row_slice(2, 2, &[1.5, -0.2, -0.2, 0.8]);
    let r = 0.4;
    let ctx = GaussianFlowContext {
        xf_mean: v(&[0.1, -0.3]),
        pf_inv: PrecisionOperator::from_covariance(&CovarianceEstimate::new(pf.clone()).unwrap()).unwrap(),
        xtau_mean: v(&[0.5, 0.2]),
        ptau_inv: PrecisionOperator::from_covariance(&CovarianceEstimate::new(pt.clone()).unwrap()).unwrap(),
        obs: ObservationModel::new(
            Arc::new(LinearObservation::selection(2, &[1])),
            v(&[0.9]),
            ObsCovariance::scaled_identity(1, r).unwrap(),
        )
        .unwrap(),
        y_members: None,
    };
    let pfi = pf.try_inverse().unwrap();
    let pti = pt.try_inverse().unwrap();
    let log_a = |x: &DVector<f64>| {
        let d = x - &ctx.xf_mean;
        -0.5 * (d.transpose() * &pfi * &d)[0] - 0.5 * (x[1] - 0.9).powi(2) / r
    };
    let log_t = |x: &DVector<f64>| {
        let d = x - &ctx.xtau_mean;
        -0.5 * (d.transpose() * &pti * &d)[0]
    };
    let x = v(&[-0.4, 1.1]);
    let f = optimal_drift(&x, &ctx, &DiffusionOperator::Zero(2), 0).unwrap();
    let h = 1e-5;
    for i in 0..2 {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let fd = (log_a(&xp) - log_a(&xm) - log_t(&xp) + log_t(&xm)) / (2.0 * h);
        assert!((f[i] - fd).abs() < 1e-5 * (1.0 + fd.abs()));
    }
}

struct Field<F: Fn(&StateVector) -> StateVector> {
    n: usize,
    f: F,
    jac: DMatrix<f64>,
}

impl<F: Fn(&StateVector) -> StateVector> DriftField for Field<F> {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn drift(&self, x: &StateVector, _member: usize) -> Result<StateVector> {
        Ok((self.f)(x))
    }
    fn jacobian(&self, _x: &StateVector) -> Result<DMatrix<f64>> {
        Ok(self.jac.clone())
    }
}

#[test]
fn euler_maruyama_examples() {
    let ens = Ensemble::new(DMatrix::from_row_slice(2, 3, &[1., 2., 3., -1., 0., 1.])).unwrap();
    let noise = NoiseSource { seed: 1, cycle: 0 };
    let c = v(&[0.5, -2.0]);
    let field = Field {
        n: 2,
        f: |_x: &StateVector| v(&[0.5, -2.0]),
        jac: DMatrix::zeros(2, 2),
    };
    let diff = DiffusionOperator::Diagonal(v(&[0.3, 0.3]));
    assert_eq!(vfp_step_em(&ens, &field, &diff, 0.0, &noise, 0).unwrap(), ens);
    let out = vfp_step_em(&ens, &field, &DiffusionOperator::Zero(2), 0.1, &noise, 0).unwrap();
    for (a, b) in out.members().zip(ens.members()) {
        assert_eq!(a, &b + &c * 0.1);
    }
}

#[test]
fn euler_maruyama_matches_scalar_loop_bitwise() {
    let ens = Ensemble::new(DMatrix::from_row_slice(1, 2, &[1.0, -0.5])).unwrap();
    let field = Field {
        n: 1,
        f: |x: &StateVector| -x,
        jac: DMatrix::from_element(1, 1, -1.0),
    };
    let diff = DiffusionOperator::Diagonal(v(&[0.5]));
    let noise = NoiseSource { seed: 42, cycle: 3 };
    let h: f64 = 0.01;
    let mut ens_run = ens.clone();
    let mut reference = [1.0f64, -0.5];
    for step in 0..50 {
        ens_run = vfp_step_em(&ens_run, &field, &diff, h, &noise, step).unwrap();
        for (e, r) in reference.iter_mut().enumerate() {
            let xi = noise.draw(step, e, 1)[0];
            *r = *r + h * (-*r) + h.sqrt() * (0.5 * xi);
        }
    }
    assert_eq!(ens_run.matrix()[(0, 0)].to_bits(), reference[0].to_bits());
    assert_eq!(ens_run.matrix()[(0, 1)].to_bits(), reference[1].to_bits());
}

#[test]
fn stabilization_examples() {
    let cs = LinearConstraints::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), v(&[0.0])).unwrap();
    let f = v(&[0.3, -0.1]);
    let on = v(&[0.0, 5.0]);
    assert_eq!(stabilize(f.clone(), &on, &cs, 30.0).unwrap(), f);
    let off = v(&[0.2, 5.0]);
    assert_eq!(stabilize(f.clone(), &off, &cs, 0.0).unwrap(), f);
    let d = stabilize(DVector::zeros(2), &off, &cs, 30.0).unwrap();
    assert!((d - v(&[-6.0, 0.0])).amax() < 1e-12);

    let ctx = scalar_ctx(0.0, 1.0, 0.0, 1.0, 2.0, 1.0);
    let cs1 = LinearConstraints::new(DMatrix::from_element(1, 1, 1.0), v(&[1.0])).unwrap();
    let zero = DiffusionOperator::Zero(1);
    let x = v(&[1.0]);
    assert_eq!(
        vfpstab_drift(&x, &ctx, &zero, &cs1, 30.0, 0).unwrap(),
        optimal_drift(&x, &ctx, &zero, 0).unwrap()
    );
}

#[test]
fn rosenbrock_examples() {
    let field = Field {
        n: 1,
        f: |x: &StateVector| -x,
        jac: DMatrix::from_element(1, 1, -1.0),
    };
    let zero = DiffusionOperator::Zero(1);
    let xi = v(&[0.7]);
    let x0 = v(&[2.0]);
    let x1 = rosenbrock_em_predictor(&x0, &field, &zero, 0.1, &xi, 0).unwrap();
    assert!((x1[0] - 2.0 * (1.0 - 0.1 / 1.1)).abs() < 1e-15);

    let diff = DiffusionOperator::Diagonal(v(&[0.4]));
    let h = 1e-8;
    let ros = rosenbrock_em_predictor(&x0, &field, &diff, h, &xi, 0).unwrap();
    let em = &x0 + (-&x0) * h + v(&[0.4 * 0.7]) * h.sqrt();
    assert!((ros - em).amax() < 10.0 * h * h * 2.0 + 1e-15);

    let flat = Field {
        n: 1,
        f: |_x: &StateVector| v(&[0.0]),
        jac: DMatrix::zeros(1, 1),
    };
    let out = rosenbrock_em_predictor(&x0, &flat, &diff, 0.25, &xi, 0).unwrap();
    assert!((out[0] - (2.0 + 0.5 * 0.4 * 0.7)).abs() < 1e-15);
}

#[derive(Debug)]
struct Circle;

impl ConstraintSystem for Circle {
    fn n_c(&self) -> usize {
        1
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn eval(&self, x: &StateVector) -> DVector<f64> {
        v(&[0.5 * (x.norm_squared() - 1.0)])
    }
    fn jacobian(&self, x: &StateVector) -> Jacobian {
        Jacobian::Dense(DMatrix::from_row_slice(1, 2, &[x[0], x[1]]))
    }
}

#[test]
fn dae_step_with_zero_flow_is_identity() {
    let ens = Ensemble::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.0, 0.8])).unwrap();
    let cs = MemberConstraints::Shared(Arc::new(Circle));
    let field = Field {
        n: 2,
        f: |_x: &StateVector| DVector::zeros(2),
        jac: DMatrix::zeros(2, 2),
    };
    let noise = NoiseSource { seed: 0, cycle: 0 };
    for scheme in [DaeScheme::AnchorAtX0, DaeScheme::EvolveProject, DaeScheme::Eliminated] {
        let mut cfg = FlowConfig::new(0.1, 1e-6, 1);
        cfg.dae_scheme = scheme;
        let out = vfpdae_step(&ens, &field, &DiffusionOperator::Zero(2), &cs, &cfg, &noise, 0, None).unwrap();
        assert_eq!(out, ens);
    }
}

#[test]
fn dae_circle_rotation_follows_polar_oracle() {
    let ens = Ensemble::new(DMatrix::from_row_slice(2, 1, &[1.0, 0.0])).unwrap();
    let cs = MemberConstraints::Shared(Arc::new(Circle));
    let field = Field {
        n: 2,
        f: |x: &StateVector| v(&[-x[1], x[0]]),
        jac: DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]),
    };
    let noise = NoiseSource { seed: 0, cycle: 0 };
    let h = 0.01;
    let cfg = FlowConfig::new(h, 1e-12, 1);
    let mut e = ens;
    for step in 0..1000 {
        e = vfpdae_step(&e, &field, &DiffusionOperator::Zero(2), &cs, &cfg, &noise, step, None).unwrap();
        let x = e.member(0);
        assert!((x.norm() - 1.0).abs() < 1e-10);
    }
    // Each step rotates by atan(h); the projection is radial.
    let angle = 1000.0 * h.atan();
    let x = e.member(0);
    assert!((x - v(&[angle.cos(), angle.sin()])).amax() < 1e-10);
}

#[test]
fn eliminated_increment_is_tangent() {
    let x0 = v(&[0.6, 0.8]);
    let g = Circle.jacobian(&x0);
    let inc = tangent_project(&g, &v(&[0.3, -1.7])).unwrap();
    assert!(g.mul_vec(&inc).amax() < 1e-10);
}

fn scalar_problem() -> (Ensemble, ObservationModel, PrecisionModel) {
    let ens = Ensemble::new(DMatrix::from_row_slice(1, 5, &[0.2, -0.4, 0.9, 0.1, -0.6])).unwrap();
    (ens, scalar_obs(1.3, 0.5), PrecisionModel::Shrinkage { gamma_sh: 1.0 })
}

#[test]
fn deterministic_flow_reaches_kalman_mean() {
    let (ens, obs, prec) = scalar_problem();
    let p = crate::ensemble::empirical_covariance(&ens).unwrap().matrix()[(0, 0)];
    let m = ens.mean()[0];
    let expect = m + p / (p + 0.5) * (1.3 - m);
    let diff = DiffusionOperator::Zero(1);
    let problem = FlowProblem {
        forecast: &ens,
        obs: &obs,
        constraints: None,
        precision: &prec,
        diffusion: &diff,
        cycle: 0,
    };
    let out = run_flow(problem, FlowMethod::Vfp, &FlowConfig::new(0.01, 1e-10, 20_000), None).unwrap();
    assert!(out.converged);
    assert!((out.ensemble.mean()[0] - expect).abs() < 1e-3);

    let once = run_flow(problem, FlowMethod::Vfp, &FlowConfig::new(0.01, 1e300, 100), None).unwrap();
    assert_eq!(once.steps, 1);
    assert!(once.converged);
}

#[test]
fn flows_are_bitwise_deterministic() {
    let ens = Ensemble::new(DMatrix::from_row_slice(2, 4, &[1.0, 0.6, 0.0, -0.8, 0.0, 0.8, 1.0, 0.6])).unwrap();
    let obs = ObservationModel::new(
        Arc::new(LinearObservation::identity(2)),
        v(&[0.9, 0.5]),
        ObsCovariance::scaled_identity(2, 0.3).unwrap(),
    )
    .unwrap();
    let prec = PrecisionModel::Shrinkage { gamma_sh: 0.5 };
    let diff = DiffusionOperator::Diagonal(v(&[0.05, 0.05]));
    let cs = MemberConstraints::Shared(Arc::new(Circle));
    let problem = FlowProblem {
        forecast: &ens,
        obs: &obs,
        constraints: Some(&cs),
        precision: &prec,
        diffusion: &diff,
        cycle: 7,
    };
    for method in [FlowMethod::Vfp, FlowMethod::VfpStab, FlowMethod::VfpDae] {
        for integrator in [Integrator::EulerMaruyama, Integrator::RosenbrockEm] {
            let mut cfg = FlowConfig::new(0.01, 1e-8, 30);
            cfg.integrator = integrator;
            cfg.gamma = 30.0;
            cfg.perturbed_obs = Some(0.05);
            cfg.seed = 11;
            let a = run_flow(problem, method, &cfg, None).unwrap();
            let b = run_flow(problem, method, &cfg, None).unwrap();
            let bits = |e: &Ensemble| e.matrix().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.ensemble), bits(&b.ensemble));
            if method == FlowMethod::VfpDae {
                assert!(a.max_abs_g.iter().all(|&g| g <= 1e-10));
            }
        }
    }
}

#[test]
fn stabilized_flow_contracts_onto_linear_constraint() {
    let cs = LinearConstraints::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), v(&[0.0])).unwrap();
    let gamma = 30.0;
    let h = 0.01;
    let cs_ref = &cs;
    let field = Field {
        n: 2,
        f: move |x: &StateVector| stabilize(DVector::zeros(2), x, cs_ref, gamma).unwrap(),
        jac: DMatrix::zeros(2, 2),
    };
    let diff = DiffusionOperator::Diagonal(v(&[0.05, 0.05]));
    let mut ens = Ensemble::new(DMatrix::from_fn(2, 100, |i, _| if i == 0 { 1.0 } else { 0.0 })).unwrap();
    let noise = NoiseSource { seed: 5, cycle: 0 };
    let mut prev = f64::INFINITY;
    for step in 0..40 {
        let mean_abs = ens.members().map(|x| x[0].abs()).sum::<f64>() / 100.0;
        if step % 4 == 0 {
            assert!(mean_abs < prev, "step {step}: {mean_abs} >= {prev}");
            prev = mean_abs;
            if mean_abs < 0.02 {
                break;
            }
        }
        ens = vfp_step_em(&ens, &field, &diff, h, &noise, step).unwrap();
    }
}

struct SplitField {
    anomaly: f64,
    mean: f64,
}

impl DriftField for SplitField {
    fn state_dim(&self) -> usize {
        1
    }
    fn drift(&self, _x: &StateVector, _member: usize) -> Result<StateVector> {
        Ok(v(&[0.0]))
    }
    fn jacobian(&self, _x: &StateVector) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_element(1, 1, self.anomaly))
    }
    fn mean_jacobian(&self, _x: &StateVector) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_element(1, 1, self.mean))
    }
}

#[test]
fn ensemble_rosenbrock_splits_mean_and_anomalies() {
    let h = 0.1;
    let field = SplitField { anomaly: -1.0, mean: -4.0 };
    let op = EnsembleRosenbrock::new(&field, &v(&[0.0]), h).unwrap();
    let inc = op.increments(&[v(&[1.0]), v(&[3.0])]).unwrap();
    let kbar = 2.0 / (1.0 + 4.0 * h);
    assert!((inc[0][0] - h * (kbar - 1.0 / (1.0 + h))).abs() < 1e-15);
    assert!((inc[1][0] - h * (kbar + 1.0 / (1.0 + h))).abs() < 1e-15);
    assert!(op.increments(&[]).unwrap().is_empty());

    // Growing anomaly modes are damped at the same rate instead.
    let growing = SplitField { anomaly: 1.0, mean: -4.0 };
    let op = EnsembleRosenbrock::new(&growing, &v(&[0.0]), h).unwrap();
    let inc = op.increments(&[v(&[1.0]), v(&[3.0])]).unwrap();
    assert!((inc[1][0] - inc[0][0] - 2.0 * h / (1.0 + h)).abs() < 1e-15);
}

#[test]
fn symmetric_reflection_keeps_eigenvectors() {
    let j = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    let r = reflect_growing_modes(j);
    // Eigenvalues 3 and -1 on (1,1) and (1,-1) become -3 and -1.
    let expected = DMatrix::from_row_slice(2, 2, &[-2.0, -1.0, -1.0, -2.0]);
    assert!((r - expected).amax() < 1e-12);
    let skew = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    assert_eq!(reflect_growing_modes(skew.clone()), skew);
}
