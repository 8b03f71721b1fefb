//! Turns a configuration into concrete models, operators and initial states.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::config::{DiffusionSpec, ExperimentConfig, GridUnits, LaplacianWeight, MethodKind, ModelConfig, PrecisionSpec, Scaling};
use crate::constraints::{project_to_manifold, ConstraintSystem, MemberConstraints};
use crate::ensemble::{Ensemble, PrecisionModel, StateVector};
use crate::error::{Error, Result};
use crate::flow::DiffusionOperator;
use crate::kalman::{FilterConfig, LocalizationConfig};
use crate::linalg::DirichletLaplacian2d;
use crate::models::kdv::Kdv;
use crate::models::ns::QgModel;
use crate::models::pendulum::{self, DoublePendulum};
use crate::models::DynamicalModel;
use crate::observation::{LinearObservation, ObsCovariance, ObservationOperator};
use crate::rng;

#[derive(Debug, Clone)]
pub enum ModelInstance {
    Pendulum(DoublePendulum),
    Kdv(Kdv),
    Ns(Arc<QgModel>),
}

impl ModelInstance {
    pub fn dynamics(&self) -> &dyn DynamicalModel {
        match self {
            ModelInstance::Pendulum(m) => m,
            ModelInstance::Kdv(m) => m,
            ModelInstance::Ns(m) => m.as_ref(),
        }
    }
}

/// Everything a run needs besides the evolving states.
#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: ModelInstance,
    pub operator: Arc<dyn ObservationOperator>,
    /// Observation error variance; `R = obs_variance · I`.
    pub obs_variance: f64,
    pub steps_per_obs: usize,
    pub obs_interval: f64,
    pub n_c: usize,
    shared: Option<Arc<dyn ConstraintSystem>>,
    kdv_anchor: Option<StateVector>,
}

fn steps_for(interval: f64, dt: f64, path: &str) -> Result<usize> {
    let n = (interval / dt).round();
    if !(n >= 1.0) || ((n * dt - interval).abs() > 1e-9 * interval.max(1.0)) {
        return Err(Error::Config {
            path: path.into(),
            message: format!("observation interval {interval} is not a multiple of the model step {dt}"),
        });
    }
    Ok(n as usize)
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (model, operator, obs_variance, steps, interval, shared, kdv_anchor): (
            ModelInstance,
            Arc<dyn ObservationOperator>,
            f64,
            usize,
            f64,
            Option<Arc<dyn ConstraintSystem>>,
            Option<StateVector>,
        ) = match &config.model {
            ModelConfig::Pendulum(p) => {
                let m = DoublePendulum::anchored_at(p.params, &pendulum::reference_state());
                let steps = steps_for(p.obs_interval, p.params.dt, "model.obs_interval")?;
                let cs: Arc<dyn ConstraintSystem> = Arc::new(m.constraints());
                (
                    ModelInstance::Pendulum(m),
                    Arc::new(LinearObservation::identity(pendulum::STATE_DIM)),
                    p.obs_variance,
                    steps,
                    p.obs_interval,
                    Some(cs),
                    None,
                )
            }
            ModelConfig::Kdv(k) => {
                let m = Kdv::new(k.params)?;
                let steps = steps_for(k.obs_interval, k.params.dt, "model.obs_interval")?;
                if k.obs_stride == 0 || k.obs_stride > k.params.n {
                    return Err(Error::Config {
                        path: "model.obs_stride".into(),
                        message: "stride must lie in 1..=n".into(),
                    });
                }
                let idx: Vec<usize> = (k.obs_stride - 1..k.params.n).step_by(k.obs_stride).collect();
                let anchor = m.two_soliton();
                let cs: Arc<dyn ConstraintSystem> = Arc::new(m.constraints(&anchor));
                (
                    ModelInstance::Kdv(m),
                    Arc::new(LinearObservation::selection(k.params.n, &idx)),
                    k.obs_variance,
                    steps,
                    k.obs_interval,
                    Some(cs),
                    Some(anchor),
                )
            }
            ModelConfig::Ns(ns) => {
                let params = ns.params.scaled(ns.grid_scale);
                let m = Arc::new(QgModel::new(params)?);
                let steps = steps_for(ns.obs_interval, params.dt, "model.obs_interval")?;
                let h = m.observation_operator();
                (
                    ModelInstance::Ns(m),
                    Arc::new(h),
                    ns.obs_variance,
                    steps,
                    ns.obs_interval,
                    None,
                    None,
                )
            }
        };
        let n_c = match (&shared, &model) {
            (Some(cs), _) => cs.n_c(),
            (None, ModelInstance::Ns(m)) => m.nodes() + 2,
            _ => 0,
        };
        Ok(Self {
            config,
            model,
            operator,
            obs_variance,
            steps_per_obs: steps,
            obs_interval: interval,
            n_c,
            shared,
            kdv_anchor,
        })
    }

    pub fn obs_covariance(&self) -> Result<ObsCovariance> {
        ObsCovariance::scaled_identity(self.operator.obs_dim(), self.obs_variance)
    }

    pub fn state_dim(&self) -> usize {
        self.model.dynamics().state_dim()
    }

    /// Initial truth and ensemble.
    pub fn initial_states(&self) -> Result<(StateVector, Ensemble)> {
        let cfg = &self.config;
        let ne = cfg.ensemble_size;
        match (&self.model, &cfg.model) {
            (ModelInstance::Pendulum(m), ModelConfig::Pendulum(p)) => {
                let seed = rng::stream_key(&[cfg.seeds.truth, cfg.seeds.ensemble]);
                let (truth, members) =
                    m.sample_truth_and_members(&pendulum::reference_state(), ne, p.sample_interval, seed)?;
                Ok((truth, Ensemble::from_columns(&members)?))
            }
            (ModelInstance::Kdv(_), ModelConfig::Kdv(k)) => {
                let truth = self.kdv_anchor.clone().expect("kdv anchor");
                let cs = self.shared.as_ref().expect("kdv constraints");
                let mut members = Vec::with_capacity(ne);
                for e in 0..ne {
                    let xi = rng::standard_normal(&[rng::tag::ENSEMBLE_INIT, cfg.seeds.ensemble, e as u64], k.params.n);
                    let x = &truth + xi * k.init_noise;
                    let p = project_to_manifold(&x, cs.as_ref(), &x, &cfg.filter.projection)
                        .map_err(|s| Error::Member {
                            member: e,
                            source: Box::new(s),
                        })?;
                    members.push(p.x);
                }
                Ok((truth, Ensemble::from_columns(&members)?))
            }
            (ModelInstance::Ns(m), ModelConfig::Ns(ns)) => {
                let truth = m.spun_up_truth(cfg.seeds.truth, ns.spinup_intervals * self.steps_per_obs);
                let members = m.perturbed_members(&truth, ne, cfg.seeds.ensemble);
                Ok((truth, Ensemble::from_columns(&members)?))
            }
            _ => unreachable!("model instance matches its configuration"),
        }
    }

    /// Constraints for an analysis of `forecast`.
    pub fn constraints_for(&self, forecast: &Ensemble) -> Result<MemberConstraints> {
        match (&self.shared, &self.model) {
            (Some(cs), _) => Ok(MemberConstraints::Shared(cs.clone())),
            (None, ModelInstance::Ns(m)) => m.member_constraints(forecast),
            _ => unreachable!("every model has constraints"),
        }
    }

    pub fn filter_config(&self, variant: crate::kalman::KalmanVariant, inflation: f64) -> FilterConfig {
        let f = &self.config.filter;
        let mut fc = FilterConfig::new(variant, inflation);
        fc.projection = f.projection;
        fc.r_g = f.r_g.map(|s| DMatrix::identity(self.n_c, self.n_c) * s);
        if variant.is_local() {
            fc.localization = f.localization_radius.map(|r| self.localization(r));
        }
        fc
    }

    fn localization(&self, radius: f64) -> LocalizationConfig {
        match &self.model {
            ModelInstance::Ns(m) => m.localization(radius),
            ModelInstance::Kdv(m) => {
                let grid = m.grid();
                let period = m.params.length;
                let h = self.operator_indices();
                LocalizationConfig {
                    radius,
                    state_coords: grid.iter().map(|&x| [x, 0.0]).collect(),
                    obs_coords: h.iter().map(|&i| [grid[i], 0.0]).collect(),
                    periodic: [Some(period), None],
                }
            }
            ModelInstance::Pendulum(_) => LocalizationConfig {
                radius,
                state_coords: vec![[0.0, 0.0]; pendulum::STATE_DIM],
                obs_coords: vec![[0.0, 0.0]; pendulum::STATE_DIM],
                periodic: [None, None],
            },
        }
    }

    fn operator_indices(&self) -> Vec<usize> {
        match &self.config.model {
            ModelConfig::Kdv(k) => (k.obs_stride - 1..k.params.n).step_by(k.obs_stride).collect(),
            _ => (0..self.operator.obs_dim()).collect(),
        }
    }

    fn model_laplacian_blocks(&self, units: GridUnits) -> Result<ModelLaplacian> {
        let index = units == GridUnits::Index;
        match &self.model {
            ModelInstance::Kdv(m) => {
                let l = m.periodic_laplacian();
                Ok(ModelLaplacian::Periodic(if index { l.scale(m.dx() * m.dx()) } else { l }))
            }
            ModelInstance::Ns(m) => {
                let l = if index {
                    DirichletLaplacian2d::new(m.params.nx, m.params.ny, 1.0, 1.0)
                } else {
                    m.node_laplacian()
                };
                Ok(ModelLaplacian::Dirichlet(Arc::new(l)))
            }
            ModelInstance::Pendulum(_) => Err(Error::Config {
                path: "filter.flow".into(),
                message: "the pendulum model has no Laplacian".into(),
            }),
        }
    }

    pub fn diffusion(&self, spec: &DiffusionSpec) -> Result<DiffusionOperator> {
        let n = self.state_dim();
        match spec {
            DiffusionSpec::Zero => Ok(DiffusionOperator::Zero(n)),
            DiffusionSpec::Diagonal { values } => {
                if values.len() != n {
                    return Err(Error::Config {
                        path: "filter.flow.diffusion.values".into(),
                        message: format!("expected {n} values, got {}", values.len()),
                    });
                }
                Ok(DiffusionOperator::Diagonal(DVector::from_vec(values.clone())))
            }
            DiffusionSpec::InverseLaplacian { scale, shift, units } => match self.model_laplacian_blocks(*units)? {
                ModelLaplacian::Periodic(l) => {
                    let m = l.add_scaled_identity(*shift).to_dense();
                    let inv = m.try_inverse().ok_or(Error::SingularSystem {
                        context: "shifted periodic Laplacian",
                        hint: "use a nonzero shift",
                    })?;
                    Ok(DiffusionOperator::Dense(inv * *scale))
                }
                ModelLaplacian::Dirichlet(l) => Ok(DiffusionOperator::InverseLaplacianBlocks {
                    laplacian: l,
                    blocks: 2,
                    scale: *scale,
                }),
            },
        }
    }

    pub fn precision(&self, spec: &PrecisionSpec) -> Result<PrecisionModel> {
        match spec {
            PrecisionSpec::Shrinkage { gamma_sh } => Ok(PrecisionModel::Shrinkage { gamma_sh: *gamma_sh }),
            PrecisionSpec::SquaredLaplacian { shift, weight, units } => {
                let l = match self.model_laplacian_blocks(*units)? {
                    ModelLaplacian::Periodic(l) => l.add_scaled_identity(*shift),
                    ModelLaplacian::Dirichlet(l) => l.to_csr().block_diagonal(2),
                };
                Ok(match weight {
                    LaplacianWeight::InverseMaxVariance => PrecisionModel::ScaledLaplacian(Arc::new(l)),
                    LaplacianWeight::MaxVariance => PrecisionModel::VarianceWeightedLaplacian(Arc::new(l)),
                })
            }
        }
    }

    /// Diagonal of each configured CRMSE scaling, with its label.
    pub fn scalings(&self) -> Result<Vec<(String, DVector<f64>)>> {
        let mut list = self.config.metrics.crmse.clone();
        if list.is_empty() {
            list = match &self.model {
                ModelInstance::Pendulum(_) => vec![Scaling::Pendulum],
                ModelInstance::Kdv(_) => vec![Scaling::Identity],
                ModelInstance::Ns(_) => vec![Scaling::Divergence, Scaling::Enstrophy, Scaling::Energy],
            };
        }
        let nc = self.n_c;
        list.iter()
            .map(|s| {
                let bad = |m: &str| Error::Config {
                    path: "metrics.crmse".into(),
                    message: format!("{} scaling: {m}", s.label()),
                };
                let d = match s {
                    Scaling::Identity => DVector::from_element(nc, 1.0),
                    Scaling::Pendulum => match &self.model {
                        ModelInstance::Pendulum(m) => DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0, 1.0 / m.e0]),
                        _ => return Err(bad("only defined for the pendulum")),
                    },
                    Scaling::Divergence | Scaling::Energy | Scaling::Enstrophy => {
                        if !matches!(self.model, ModelInstance::Ns(_)) {
                            return Err(bad("only defined for the ns model"));
                        }
                        let n = nc - 2;
                        DVector::from_fn(nc, |i, _| match s {
                            Scaling::Divergence => (i < n) as u8 as f64,
                            Scaling::Energy => (i == n) as u8 as f64,
                            _ => (i == n + 1) as u8 as f64,
                        })
                    }
                    Scaling::Diagonal(v) => {
                        if v.len() != nc {
                            return Err(Error::DimensionMismatch {
                                context: "CRMSE scaling",
                                expected: nc,
                                got: v.len(),
                            });
                        }
                        DVector::from_vec(v.clone())
                    }
                };
                Ok((s.label(), d))
            })
            .collect()
    }

    pub fn method_kind(&self) -> MethodKind {
        self.config.filter.method.kind()
    }
}

enum ModelLaplacian {
    Periodic(crate::linalg::CsrMatrix),
    Dirichlet(Arc<DirichletLaplacian2d>),
}
