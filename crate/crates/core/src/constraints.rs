//! Equality constraint manifolds `{x : g(x) = 0}`, Newton projection onto
//! them and pseudo-observation augmentation.
//!
//! Constraint Jacobians come in two shapes. Small systems return a dense
//! matrix. Large systems whose rows split into a constant sparse block `B`
//! and a few dense state-dependent rows `C(x)` return the structured form,
//! and every solve with `G(x) Gᵀ(a)` then goes through a banded factor of
//! `B Bᵀ` and a small Schur complement.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::ensemble::StateVector;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{BandedCholesky, CsrMatrix};
use crate::observation::{AugmentedOperator, ObsCovariance, ObservationModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    /// Invariant of the state alone, shared by all members.
    StateInvariant,
    /// Anchored to a member's own forecast, `h(x_a) − h(x_f)`.
    ForecastRelative,
}

/// Constant sparse block of a constraint Jacobian together with a
/// factorization of its Gram matrix `B Bᵀ`.
#[derive(Debug)]
pub struct LinearBlock {
    matrix: CsrMatrix,
    transpose: CsrMatrix,
    gram: BandedCholesky,
}

impl LinearBlock {
    pub fn new(matrix: CsrMatrix) -> Result<Self> {
        let transpose = matrix.transpose();
        let gram = BandedCholesky::factor(&matrix.matmul(&transpose), 1e-10)?;
        Ok(Self {
            matrix,
            transpose,
            gram,
        })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    /// Dimension of the null space of `B Bᵀ` detected during factorization.
    pub fn rank_deficiency(&self) -> usize {
        self.gram.rank_deficiency()
    }

    /// A solution of `B Bᵀ z = r` for `r` in the range of `B`.
    fn gram_solve(&self, r: &DVector<f64>) -> DVector<f64> {
        let mut z = r.clone();
        self.gram.solve_in_place(z.as_mut_slice());
        z
    }

    fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        self.matrix.mul_vec(x)
    }

    fn tr_mul(&self, z: &DVector<f64>) -> DVector<f64> {
        self.transpose.mul_vec(z)
    }
}

/// Constraint Jacobian `G(x) ∈ ℝ^{n_c × n_s}`.
#[derive(Debug, Clone)]
pub enum Jacobian {
    Dense(DMatrix<f64>),
    /// Rows `[B; C]` with `B` constant and sparse.
    Structured {
        linear: Arc<LinearBlock>,
        nonlinear: DMatrix<f64>,
    },
}

impl Jacobian {
    pub fn nrows(&self) -> usize {
        match self {
            Jacobian::Dense(m) => m.nrows(),
            Jacobian::Structured { linear, nonlinear } => linear.nrows() + nonlinear.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            Jacobian::Dense(m) => m.ncols(),
            Jacobian::Structured { nonlinear, linear } => linear.matrix.ncols().max(nonlinear.ncols()),
        }
    }

    /// `G v`.
    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Jacobian::Dense(m) => m * v,
            Jacobian::Structured { linear, nonlinear } => {
                let a = linear.mul(v);
                let b = nonlinear * v;
                DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
            }
        }
    }

    /// `Gᵀ z`.
    pub fn tr_mul_vec(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            Jacobian::Dense(m) => m.tr_mul(z),
            Jacobian::Structured { linear, nonlinear } => {
                let nl = linear.nrows();
                let mut out = linear.tr_mul(&z.rows(0, nl).into_owned());
                out += nonlinear.tr_mul(&z.rows(nl, z.len() - nl).into_owned());
                out
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Jacobian::Dense(m) => m.clone(),
            Jacobian::Structured { linear, nonlinear } => {
                let nl = linear.nrows();
                let mut out = DMatrix::zeros(self.nrows(), self.ncols());
                out.view_mut((0, 0), (nl, self.ncols())).copy_from(&linear.matrix.to_dense());
                out.view_mut((nl, 0), (nonlinear.nrows(), self.ncols())).copy_from(nonlinear);
                out
            }
        }
    }
}

/// Solves `G_k G_aᵀ μ = r`.
pub fn solve_inner(gk: &Jacobian, ga: &Jacobian, r: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("inner system right-hand side", gk.nrows(), r.len())?;
    match (gk, ga) {
        (Jacobian::Dense(k), Jacobian::Dense(a)) => {
            let m = k * a.transpose();
            m.lu().solve(r).ok_or(Error::RankDeficient {
                context: "constraint Jacobian product G(x) Gᵀ(anchor)",
            })
        }
        (
            Jacobian::Structured {
                linear,
                nonlinear: ck,
            },
            Jacobian::Structured {
                linear: la,
                nonlinear: ca,
            },
        ) if Arc::ptr_eq(linear, la) => structured_solve(linear, ck, ca, r),
        _ => {
            let m = gk.to_dense() * ga.to_dense().transpose();
            m.lu().solve(r).ok_or(Error::RankDeficient {
                context: "constraint Jacobian product G(x) Gᵀ(anchor)",
            })
        }
    }
}

fn structured_solve(
    lin: &LinearBlock,
    ck: &DMatrix<f64>,
    ca: &DMatrix<f64>,
    r: &DVector<f64>,
) -> Result<DVector<f64>> {
    let nl = lin.nrows();
    let nn = ck.nrows();
    let rl = r.rows(0, nl).into_owned();
    let rn = r.rows(nl, nn).into_owned();
    // (I − Π) v with Π = Bᵀ (B Bᵀ)⁺ B the projector onto the row space of B.
    let complement = |v: DVector<f64>| -> DVector<f64> {
        let z = lin.gram_solve(&lin.mul(&v));
        v - lin.tr_mul(&z)
    };
    let mut s = DMatrix::zeros(nn, nn);
    for j in 0..nn {
        let col = complement(ca.row(j).transpose());
        for i in 0..nn {
            s[(i, j)] = ck.row(i).transpose().dot(&col);
        }
    }
    let kl = lin.gram_solve(&rl);
    let rhs = rn - ck * lin.tr_mul(&kl);
    let mu_n = if nn == 0 {
        DVector::zeros(0)
    } else {
        s.lu().solve(&rhs).ok_or(Error::RankDeficient {
            context: "Schur complement of the nonlinear constraint rows",
        })?
    };
    let mu_l = lin.gram_solve(&(rl - lin.mul(&ca.tr_mul(&mu_n))));
    Ok(DVector::from_iterator(
        nl + nn,
        mu_l.iter().chain(mu_n.iter()).copied(),
    ))
}

/// `G†r = Gᵀ (G Gᵀ)⁻¹ r`.
pub fn pseudo_inverse_apply(g: &Jacobian, r: &DVector<f64>) -> Result<StateVector> {
    Ok(g.tr_mul_vec(&solve_inner(g, g, r)?))
}

/// `(I − G† G) v`, the orthogonal projection onto the tangent space.
pub fn tangent_project(g: &Jacobian, v: &StateVector) -> Result<StateVector> {
    Ok(v - pseudo_inverse_apply(g, &g.mul_vec(v))?)
}

/// Equality constraint system `g: ℝ^{n_s} → ℝ^{n_c}` with Jacobian `G`.
pub trait ConstraintSystem: Debug + Send + Sync {
    fn n_c(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn eval(&self, x: &StateVector) -> DVector<f64>;
    fn jacobian(&self, x: &StateVector) -> Jacobian;

    fn kind(&self) -> ConstraintKind {
        ConstraintKind::StateInvariant
    }

    /// Magnitude of the quantities entering each row of `g`, used to set a
    /// round-off floor on the projection tolerance. Zero means no floor.
    fn row_magnitudes(&self, _x: &StateVector) -> DVector<f64> {
        DVector::zeros(self.n_c())
    }
}

/// Constraint systems for an ensemble: one shared system, or one per member.
#[derive(Debug, Clone)]
pub enum MemberConstraints {
    Shared(Arc<dyn ConstraintSystem>),
    PerMember(Vec<Arc<dyn ConstraintSystem>>),
}

impl MemberConstraints {
    pub fn get(&self, member: usize) -> &Arc<dyn ConstraintSystem> {
        match self {
            MemberConstraints::Shared(cs) => cs,
            MemberConstraints::PerMember(v) => &v[member],
        }
    }

    pub fn n_c(&self) -> usize {
        self.get(0).n_c()
    }

    pub fn kind(&self) -> ConstraintKind {
        self.get(0).kind()
    }

    pub fn shared(&self) -> Option<&Arc<dyn ConstraintSystem>> {
        match self {
            MemberConstraints::Shared(cs) => Some(cs),
            MemberConstraints::PerMember(_) => None,
        }
    }
}

/// Affine constraints `A x − b` with a dense matrix.
#[derive(Debug, Clone)]
pub struct LinearConstraints {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl LinearConstraints {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        check_dim("linear constraint offset", a.nrows(), b.len())?;
        Ok(Self { a, b })
    }
}

impl ConstraintSystem for LinearConstraints {
    fn n_c(&self) -> usize {
        self.a.nrows()
    }

    fn state_dim(&self) -> usize {
        self.a.ncols()
    }

    fn eval(&self, x: &StateVector) -> DVector<f64> {
        &self.a * x - &self.b
    }

    fn jacobian(&self, _x: &StateVector) -> Jacobian {
        Jacobian::Dense(self.a.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub x: StateVector,
    pub lambda: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
}

fn converged(g: &DVector<f64>, mags: &DVector<f64>, tol: f64) -> bool {
    g.iter()
        .zip(mags.iter())
        .all(|(gi, mi)| gi.abs() <= tol.max(64.0 * f64::EPSILON * mi))
}

/// Projects `x_hat` onto the manifold along the rows of `G(jac_anchor)`:
/// `x = x_hat − Gᵀ(anchor) λ` with `g(x) = 0`.
pub fn project_to_manifold(
    x_hat: &StateVector,
    cs: &dyn ConstraintSystem,
    jac_anchor: &StateVector,
    cfg: &ProjectionConfig,
) -> Result<ProjectionResult> {
    check_dim("projection state", cs.state_dim(), x_hat.len())?;
    check_dim("projection anchor", cs.state_dim(), jac_anchor.len())?;
    let ga = cs.jacobian(jac_anchor);
    let mut x = x_hat.clone();
    let mut lambda = DVector::zeros(cs.n_c());
    let mut g = cs.eval(&x);
    let mut mags = cs.row_magnitudes(&x);
    for it in 0..=cfg.max_iter {
        if converged(&g, &mags, cfg.tol) {
            return Ok(ProjectionResult {
                x,
                lambda,
                iterations: it,
                residual: g.amax(),
            });
        }
        if it == cfg.max_iter {
            break;
        }
        let gk = cs.jacobian(&x);
        let dl = solve_inner(&gk, &ga, &g)?;
        if dl.iter().any(|v| !v.is_finite()) {
            return Err(Error::RankDeficient {
                context: "constraint Jacobian product G(x) Gᵀ(anchor)",
            });
        }
        let step = ga.tr_mul_vec(&dl);
        let norm0 = g.norm();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let xt = &x - &step * t;
            let gt = cs.eval(&xt);
            if gt.norm() < norm0 {
                accepted = Some((xt, gt, t));
                break;
            }
            t *= 0.5;
        }
        let (xn, gn, tn) = accepted.unwrap_or_else(|| {
            let xt = &x - &step;
            let gt = cs.eval(&xt);
            (xt, gt, 1.0)
        });
        if gn.iter().any(|v| !v.is_finite()) {
            break;
        }
        x = xn;
        g = gn;
        lambda += dl * tn;
        mags = cs.row_magnitudes(&x);
    }
    Err(Error::ProjectionFailed {
        iterations: cfg.max_iter,
        residual: g.amax(),
    })
}

/// Largest `|G_ij − FD_ij| / (1 + |G_ij|)` against central differences.
pub fn jacobian_check(cs: &dyn ConstraintSystem, x: &StateVector, h_fd: f64) -> f64 {
    let g = cs.jacobian(x).to_dense();
    let mut worst: f64 = 0.0;
    let mut xp = x.clone();
    for j in 0..x.len() {
        xp[j] = x[j] + h_fd;
        let gp = cs.eval(&xp);
        xp[j] = x[j] - h_fd;
        let gm = cs.eval(&xp);
        xp[j] = x[j];
        for i in 0..g.nrows() {
            let fd = (gp[i] - gm[i]) / (2.0 * h_fd);
            worst = worst.max((g[(i, j)] - fd).abs() / (1.0 + g[(i, j)].abs()));
        }
    }
    worst
}

/// Pseudo-observation augmentation: `Ĥ = [H; g]`, `ŷ = [y; 0]`,
/// `R̂ = blockdiag(R, R_g)`.
pub fn augment_observations(
    obs: &ObservationModel,
    cs: Arc<dyn ConstraintSystem>,
    r_g: &DMatrix<f64>,
) -> Result<ObservationModel> {
    let nc = cs.n_c();
    check_dim("constraint state dimension", obs.state_dim(), cs.state_dim())?;
    if nc == 0 {
        return Ok(obs.clone());
    }
    check_dim("R_g size", nc, r_g.nrows())?;
    let rg = ObsCovariance::from_matrix(r_g.clone(), "R_g")?;
    let y = DVector::from_iterator(
        obs.obs_dim() + nc,
        obs.y.iter().copied().chain(std::iter::repeat_n(0.0, nc)),
    );
    ObservationModel::new(
        Arc::new(AugmentedOperator::new(obs.operator.clone(), cs)),
        y,
        obs.r.block_diagonal(&rg),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::LinearObservation;
    use proptest::prelude::*;

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
            DVector::from_element(1, 0.5 * (x.norm_squared() - 1.0))
        }
        fn jacobian(&self, x: &StateVector) -> Jacobian {
            Jacobian::Dense(DMatrix::from_row_slice(1, 2, &[x[0], x[1]]))
        }
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn on_manifold_input_is_returned() {
        let x = v(&[0.6, 0.8]);
        let p = project_to_manifold(&x, &Circle, &x, &ProjectionConfig::default()).unwrap();
        assert_eq!(p.x, x);
        assert_eq!(p.lambda, DVector::zeros(1));
        assert!(p.iterations <= 1);
    }

    #[test]
    fn linear_projection_matches_closed_form() {
        let a = v(&[1.0, -2.0, 0.5, 3.0]);
        let cs = LinearConstraints::new(DMatrix::from_row_slice(1, 4, a.as_slice()), v(&[0.7])).unwrap();
        let xh = v(&[0.3, 1.1, -2.0, 0.4]);
        let p = project_to_manifold(&xh, &cs, &xh, &ProjectionConfig::default()).unwrap();
        let expect = &xh - &a * ((a.dot(&xh) - 0.7) / a.dot(&a));
        assert!((p.x - expect).amax() < 1e-12);
    }

    #[test]
    fn nonconvergence_reports_residual() {
        let x = v(&[3.0, 4.0]);
        let cfg = ProjectionConfig {
            max_iter: 1,
            ..Default::default()
        };
        match project_to_manifold(&x, &Circle, &x, &cfg) {
            Err(Error::ProjectionFailed { residual, .. }) => assert!(residual > 1e-10),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn singular_inner_matrix_is_rank_deficient() {
        let cs = LinearConstraints::new(DMatrix::from_row_slice(2, 2, &[1., 1., 2., 2.]), v(&[1., 1.])).unwrap();
        let x = v(&[0.0, 0.0]);
        assert!(matches!(
            project_to_manifold(&x, &cs, &x, &ProjectionConfig::default()),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn jacobian_check_linear_and_circle() {
        let cs = LinearConstraints::new(DMatrix::from_row_slice(2, 3, &[1., 2., 3., -1., 0., 4.]), v(&[0., 1.])).unwrap();
        for h in [1e-3, 1e-6, 0.5] {
            assert!(jacobian_check(&cs, &v(&[0.1, 0.2, 0.3]), h) < 1e-10);
        }
        assert!(jacobian_check(&Circle, &v(&[0.3, -1.2]), 1e-6) < 1e-8);
    }

    #[test]
    fn structured_solve_matches_dense() {
        // Linear rows with a null space in B Bᵀ plus two nonlinear rows.
        let b = CsrMatrix::from_dense(&DMatrix::from_row_slice(
            3,
            5,
            &[1., -1., 0., 0., 0., 0., 1., -1., 0., 0., -1., 0., 1., 0., 0.],
        ));
        let lin = Arc::new(LinearBlock::new(b.clone()).unwrap());
        assert_eq!(lin.rank_deficiency(), 1);
        let ck = DMatrix::from_row_slice(2, 5, &[0.3, 0.1, 0.2, 1.0, -0.5, 0.0, 0.4, -0.2, 0.3, 1.1]);
        let ca = DMatrix::from_row_slice(2, 5, &[0.2, 0.1, 0.3, 0.9, -0.4, 0.1, 0.5, -0.1, 0.2, 1.0]);
        let gk = Jacobian::Structured {
            linear: lin.clone(),
            nonlinear: ck,
        };
        let ga = Jacobian::Structured {
            linear: lin,
            nonlinear: ca,
        };
        // A right-hand side of the form G_k Gᵀ_a μ is consistent.
        let mu = v(&[0.5, -1.0, 2.0, 0.3, -0.7]);
        let dense = gk.to_dense() * ga.to_dense().transpose();
        let r = &dense * &mu;
        let sol = solve_inner(&gk, &ga, &r).unwrap();
        assert!((&dense * &sol - &r).amax() < 1e-10);
        assert!((ga.tr_mul_vec(&sol) - ga.tr_mul_vec(&mu)).amax() < 1e-10);
    }

    #[test]
    fn tangent_projection_is_tangent() {
        let x = v(&[0.6, 0.8]);
        let g = Circle.jacobian(&x);
        let t = tangent_project(&g, &v(&[1.0, 2.0])).unwrap();
        assert!(g.mul_vec(&t).amax() < 1e-14);
    }

    #[test]
    fn augmentation_shapes() {
        let obs = ObservationModel::new(
            Arc::new(LinearObservation::identity(2)),
            v(&[1.0, 2.0]),
            ObsCovariance::scaled_identity(2, 0.1).unwrap(),
        )
        .unwrap();
        let aug = augment_observations(&obs, Arc::new(Circle), &DMatrix::identity(1, 1)).unwrap();
        assert_eq!(aug.obs_dim(), 3);
        assert_eq!(aug.y, v(&[1.0, 2.0, 0.0]));
        let x = v(&[2.0, 0.0]);
        assert_eq!(aug.operator.apply(&x), v(&[2.0, 0.0, 1.5]));
        let none = LinearConstraints::new(DMatrix::zeros(0, 2), DVector::zeros(0)).unwrap();
        let same = augment_observations(&obs, Arc::new(none), &DMatrix::zeros(0, 0)).unwrap();
        assert_eq!(same.obs_dim(), 2);
        assert!(augment_observations(&obs, Arc::new(Circle), &DMatrix::from_element(1, 1, -1.0)).is_err());
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_in_row_space(a in -3.0f64..3.0, b in -3.0f64..3.0) {
            prop_assume!(a.hypot(b) > 0.2);
            let xh = v(&[a, b]);
            let cfg = ProjectionConfig::default();
            let p = project_to_manifold(&xh, &Circle, &xh, &cfg).unwrap();
            let q = project_to_manifold(&p.x, &Circle, &p.x, &cfg).unwrap();
            prop_assert!((&q.x - &p.x).amax() < 1e-10);
            // correction lies along Gᵀ(x_hat) = x_hat
            let d = &xh - &p.x;
            let resid = &d - &xh * (d.dot(&xh) / xh.dot(&xh));
            prop_assert!(resid.amax() < 1e-10);
        }
    }
}
