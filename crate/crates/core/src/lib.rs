//! Constraint-preserving ensemble data assimilation.
//!
//! The crate provides ensemble statistics and covariance regularization,
//! constraint manifolds with Newton projection, ETKF/LETKF analyses with
//! projected and pseudo-observation variants, variational Fokker–Planck
//! particle flows (plain, stabilized and differential-algebraic), three
//! constrained test models and a twin-experiment harness.

// NaN-rejecting guards and stencil loops read better as written.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod constraints;
pub mod ensemble;
pub mod error;
pub mod flow;
pub mod harness;
pub mod kalman;
pub mod linalg;
pub mod models;
pub mod observation;
pub mod rng;

pub use constraints::{
    augment_observations, jacobian_check, project_to_manifold, LinearConstraints, ConstraintKind, ConstraintSystem, Jacobian, LinearBlock,
    MemberConstraints, ProjectionConfig, ProjectionResult,
};
pub use ensemble::{
    apply_precision, empirical_covariance, PrecisionModel, ensemble_anomalies, ensemble_mean, laplacian_precision,
    shrink_covariance, CovarianceEstimate, Ensemble, PrecisionOperator, StateVector,
};
pub use error::{Error, Result};
pub use observation::{LinearObservation, ObsCovariance, ObservationModel, ObservationOperator};
pub use kalman::{
    constrained_variant, etkf_analysis, gaspari_cohn, inflate, letkf_analysis, FilterConfig,
    KalmanVariant, LocalizationConfig,
};
pub use flow::{
    run_flow, DaeScheme, DiffusionOperator, FlowConfig, FlowMethod, FlowOutcome, FlowProblem,
    GaussianFlowContext, Integrator,
};
