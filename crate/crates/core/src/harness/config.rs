//! Experiment configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constraints::ProjectionConfig;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowMethod};
use crate::kalman::KalmanVariant;
use crate::models::kdv::KdvParams;
use crate::models::ns::NsParams;
use crate::models::pendulum::PendulumParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Number of assimilation cycles.
    pub cycles: usize,
    /// Cycles excluded from the error statistics.
    pub spinup: usize,
    pub ensemble_size: usize,
    /// Store per-cycle wall time. Off makes records byte-reproducible.
    #[serde(default = "yes")]
    pub record_timing: bool,
    pub seeds: Seeds,
    pub model: ModelConfig,
    pub filter: FilterSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub truth: u64,
    pub obs_noise: u64,
    pub ensemble: u64,
    pub flow: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            truth: seed,
            obs_noise: seed,
            ensemble: seed,
            flow: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Pendulum(PendulumSetup),
    Kdv(KdvSetup),
    Ns(NsSetup),
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Pendulum(_) => "pendulum",
            ModelConfig::Kdv(_) => "kdv",
            ModelConfig::Ns(_) => "ns",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumSetup {
    pub params: PendulumParams,
    pub obs_interval: f64,
    pub obs_variance: f64,
    /// Spacing of the trajectory the truth and members are drawn from.
    pub sample_interval: f64,
}

impl Default for PendulumSetup {
    fn default() -> Self {
        Self {
            params: PendulumParams::default(),
            obs_interval: 0.1,
            obs_variance: 0.1,
            sample_interval: 0.008,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdvSetup {
    pub params: KdvParams,
    pub obs_interval: f64,
    /// Every `obs_stride`-th grid value is observed, starting at the last of
    /// the first stride.
    pub obs_stride: usize,
    pub obs_variance: f64,
    /// Standard deviation of the initial member perturbations.
    pub init_noise: f64,
}

impl Default for KdvSetup {
    fn default() -> Self {
        Self {
            params: KdvParams::default(),
            obs_interval: 0.01,
            obs_stride: 4,
            obs_variance: 0.2,
            init_noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NsSetup {
    pub params: NsParams,
    /// Factor applied to both node counts.
    pub grid_scale: f64,
    pub obs_interval: f64,
    pub obs_variance: f64,
    /// Truth spinup measured in observation intervals.
    pub spinup_intervals: usize,
}

impl Default for NsSetup {
    fn default() -> Self {
        Self {
            params: NsParams::default(),
            grid_scale: 1.0,
            obs_interval: 0.0109,
            obs_variance: 400.0,
            spinup_intervals: 100,
        }
    }
}

/// Every analysis method the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Etkf,
    Etkfp,
    Etkfa,
    Letkf,
    Letkfp,
    Letkfa,
    Vfp,
    Vfpstab,
    Vfpdae,
}

/// A method is either a transform filter or a particle flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    Kalman(KalmanVariant),
    Flow(FlowMethod),
}

impl Method {
    pub fn kind(self) -> MethodKind {
        use MethodKind::*;
        match self {
            Method::Etkf => Kalman(KalmanVariant::Etkf),
            Method::Etkfp => Kalman(KalmanVariant::Etkfp),
            Method::Etkfa => Kalman(KalmanVariant::Etkfa),
            Method::Letkf => Kalman(KalmanVariant::Letkf),
            Method::Letkfp => Kalman(KalmanVariant::Letkfp),
            Method::Letkfa => Kalman(KalmanVariant::Letkfa),
            Method::Vfp => Flow(FlowMethod::Vfp),
            Method::Vfpstab => Flow(FlowMethod::VfpStab),
            Method::Vfpdae => Flow(FlowMethod::VfpDae),
        }
    }

    pub fn name(self) -> &'static str {
        match self.kind() {
            MethodKind::Kalman(v) => v.name(),
            MethodKind::Flow(f) => f.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub method: Method,
    #[serde(default = "one")]
    pub inflation: f64,
    /// Pseudo-observation covariance `r_g · I`.
    #[serde(default)]
    pub r_g: Option<f64>,
    #[serde(default)]
    pub localization_radius: Option<f64>,
    #[serde(default)]
    pub projection: ProjectionConfig,
    #[serde(default)]
    pub flow: Option<FlowSection>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    /// Pseudo-time integration settings. Its `seed` is replaced by
    /// `seeds.flow`.
    pub config: FlowConfig,
    pub diffusion: DiffusionSpec,
    pub precision: PrecisionSpec,
    #[serde(default)]
    pub init: FlowInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionSpec {
    Zero,
    Diagonal { values: Vec<f64> },
    /// `scale · (Δ + shift·I)⁻¹` with the model's Laplacian, block diagonal
    /// over velocity components where applicable.
    InverseLaplacian {
        scale: f64,
        shift: f64,
        #[serde(default)]
        units: GridUnits,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PrecisionSpec {
    Shrinkage { gamma_sh: f64 },
    /// `(Δ + shift·I)²` weighted by the largest ensemble variance.
    SquaredLaplacian {
        shift: f64,
        #[serde(default)]
        weight: LaplacianWeight,
        #[serde(default)]
        units: GridUnits,
    },
}

/// Spacing used for the model Laplacian in flow covariances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridUnits {
    /// Divided by the squared grid spacing.
    #[default]
    Physical,
    /// Unit spacing: the plain second-difference stencil.
    Index,
}

/// How the largest ensemble variance `v` scales a squared Laplacian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianWeight {
    /// `1/v`, a precision in the units of the state.
    #[default]
    InverseMaxVariance,
    /// `v`.
    MaxVariance,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowInit {
    #[default]
    Forecast,
    /// Starts from a projected ETKF analysis with this inflation.
    Etkfp { inflation: f64 },
}

/// Diagonal scaling `E` applied before the constraint statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    Identity,
    /// `diag(1, 1, 1, 1, 1/E₀)`.
    Pendulum,
    Divergence,
    Energy,
    Enstrophy,
    Diagonal(Vec<f64>),
}

impl Scaling {
    pub fn label(&self) -> String {
        match self {
            Scaling::Identity => "identity".into(),
            Scaling::Pendulum => "pendulum".into(),
            Scaling::Divergence => "divergence".into(),
            Scaling::Energy => "energy".into(),
            Scaling::Enstrophy => "enstrophy".into(),
            Scaling::Diagonal(_) => "diagonal".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// CRMSE scalings; the first one is the headline column. Empty selects
    /// the model default.
    pub crmse: Vec<Scaling>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
            path: String::new(),
            message: e.message().trim().to_string(),
        })?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path,
                message: e.into_inner().message().trim().to_string(),
            }
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg = Self::from_toml_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Uses `seed` for every random stream.
    pub fn override_seed(&mut self, seed: u64) {
        self.seeds = Seeds::all(seed);
    }

    pub fn override_cycles(&mut self, cycles: usize) {
        self.cycles = cycles;
        self.spinup = self.spinup.min(cycles);
    }

    pub fn override_grid_scale(&mut self, scale: f64) -> Result<()> {
        match &mut self.model {
            ModelConfig::Ns(ns) => {
                ns.grid_scale = scale;
                Ok(())
            }
            other => Err(Error::Config {
                path: "model.grid_scale".into(),
                message: format!("grid scaling applies to the ns model, not {}", other.name()),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| {
            Err(Error::Config {
                path: path.into(),
                message,
            })
        };
        if self.spinup > self.cycles {
            return bad("spinup", format!("spinup {} exceeds cycles {}", self.spinup, self.cycles));
        }
        if self.ensemble_size < 2 {
            return bad("ensemble_size", "need at least 2 members".into());
        }
        if !(self.filter.inflation >= 1.0) {
            return bad("filter.inflation", "inflation must be at least 1".into());
        }
        match self.filter.method.kind() {
            MethodKind::Kalman(v) => {
                if v.is_local() && !matches!(self.filter.localization_radius, Some(r) if r > 0.0) {
                    return bad("filter.localization_radius", format!("{} needs a positive radius", v.name()));
                }
                if v.is_augmented() {
                    if !matches!(self.filter.r_g, Some(r) if r > 0.0) {
                        return bad("filter.r_g", format!("{} needs a positive r_g", v.name()));
                    }
                    if matches!(self.model, ModelConfig::Ns(_)) {
                        return bad(
                            "filter.method",
                            "pseudo-observations need a constraint shared by all members".into(),
                        );
                    }
                }
            }
            MethodKind::Flow(f) => {
                if self.filter.flow.is_none() {
                    return bad("filter.flow", format!("{} needs a [filter.flow] section", f.name()));
                }
            }
        }
        if let Some(flow) = &self.filter.flow {
            if let DiffusionSpec::InverseLaplacian { shift, .. } = flow.diffusion {
                if matches!(self.model, ModelConfig::Ns(_)) && shift != 0.0 {
                    return bad("filter.flow.diffusion.shift", "the ns Laplacian takes no shift".into());
                }
            }
            if let PrecisionSpec::SquaredLaplacian { shift, .. } = flow.precision {
                if matches!(self.model, ModelConfig::Ns(_)) && shift != 0.0 {
                    return bad("filter.flow.precision.shift", "the ns Laplacian takes no shift".into());
                }
            }
        }
        if let ModelConfig::Ns(ns) = &self.model {
            if !(ns.grid_scale > 0.0) {
                return bad("model.grid_scale", "must be positive".into());
            }
        }
        Ok(())
    }
}
