//! Deterministic square-root ensemble Kalman analyses (global and
//! R-localized) and their projected (`P`) and pseudo-observation (`A`)
//! constrained variants.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraints::{
    augment_observations, project_to_manifold, ConstraintKind, MemberConstraints, ProjectionConfig,
};
use crate::ensemble::{ensemble_anomalies, Ensemble};
use crate::error::{check_dim, Error, Result};
use crate::linalg::symmetrize;
use crate::observation::ObservationModel;

/// `x̄ + α (x_e − x̄)` for every member.
pub fn inflate(ens: &Ensemble, alpha: f64) -> Result<Ensemble> {
    if !(alpha >= 1.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "inflation",
            value: alpha,
            reason: "inflation factor must be finite and at least 1",
        });
    }
    if alpha == 1.0 {
        ensemble_anomalies(ens)?;
        return Ok(ens.clone());
    }
    let mean = ens.mean();
    let mut a = ensemble_anomalies(ens)? * alpha;
    for mut c in a.column_iter_mut() {
        c += &mean;
    }
    Ensemble::new(a)
}

/// Ensemble-space transform: analysis members are `x̄ + X'(w̄ 1ᵀ + W)`.
struct Transform {
    mean: DVector<f64>,
    w: DMatrix<f64>,
}

impl Transform {
    /// From `C = Sᵀ R⁻¹ S` and `b = Sᵀ R⁻¹ (y − ȳ)`.
    fn from_normal(mut c: DMatrix<f64>, b: &DVector<f64>) -> Result<Self> {
        let ne = c.nrows();
        let nm1 = (ne - 1) as f64;
        for i in 0..ne {
            c[(i, i)] += nm1;
        }
        symmetrize(&mut c);
        let eig = c.symmetric_eigen();
        let min = eig.eigenvalues.min();
        if !(min > 0.0) || eig.eigenvalues.iter().any(|l| !l.is_finite()) {
            return Err(Error::NotPositiveDefinite {
                context: "ensemble transform matrix (n_e − 1) I + Sᵀ R⁻¹ S",
                detail: format!("minimum eigenvalue {min:.3e}"),
            });
        }
        let v = &eig.eigenvectors;
        let inv = DVector::from_iterator(ne, eig.eigenvalues.iter().map(|l| 1.0 / l));
        let sq = DVector::from_iterator(ne, eig.eigenvalues.iter().map(|l| (nm1 / l).sqrt()));
        let p = v * DMatrix::from_diagonal(&inv) * v.transpose();
        let mut w = v * DMatrix::from_diagonal(&sq) * v.transpose();
        symmetrize(&mut w);
        Ok(Self { mean: p * b, w })
    }

    fn matrix(&self) -> DMatrix<f64> {
        let mut t = self.w.clone();
        for mut col in t.column_iter_mut() {
            col += &self.mean;
        }
        t
    }
}

struct ObsSpace {
    /// `S`, observation-space anomalies, `n_o × n_e`.
    s: DMatrix<f64>,
    /// `y − ȳ`.
    d: DVector<f64>,
}

fn obs_space(ens: &Ensemble, obs: &ObservationModel) -> Result<ObsSpace> {
    check_dim("observation operator state dimension", ens.state_dim(), obs.state_dim())?;
    let cols: Vec<_> = ens.members().map(|x| obs.operator.apply(&x)).collect();
    let mut y = DMatrix::from_columns(&cols);
    let ybar = y.column_mean();
    for mut c in y.column_iter_mut() {
        c -= &ybar;
    }
    Ok(ObsSpace {
        s: y,
        d: &obs.y - ybar,
    })
}

fn apply_transform(ens: &Ensemble, t: &DMatrix<f64>) -> Result<Ensemble> {
    let mean = ens.mean();
    let mut xa = ensemble_anomalies(ens)? * t;
    for mut c in xa.column_iter_mut() {
        c += &mean;
    }
    Ensemble::new(xa)
}

/// Global ETKF with the symmetric square root transform.
pub fn etkf_analysis(ens: &Ensemble, obs: &ObservationModel, alpha: f64) -> Result<Ensemble> {
    let infl = inflate(ens, alpha)?;
    let os = obs_space(&infl, obs)?;
    let rinv_s = obs.r.solve_matrix(&os.s);
    let c = os.s.transpose() * &rinv_s;
    let b = rinv_s.transpose() * &os.d;
    let t = Transform::from_normal(c, &b)?;
    apply_transform(&infl, &t.matrix())
}

/// Fifth-order piecewise rational taper with half-width `c` (support `2c`).
pub fn gaspari_cohn(distance: f64, c: f64) -> f64 {
    let r = distance.abs() / c;
    if r <= 1.0 {
        (((-0.25 * r + 0.5) * r + 0.625) * r - 5.0 / 3.0) * r * r + 1.0
    } else if r < 2.0 {
        ((((r / 12.0 - 0.5) * r + 0.625) * r + 5.0 / 3.0) * r - 5.0) * r + 4.0 - 2.0 / (3.0 * r)
    } else {
        0.0
    }
}

/// Geometry for R-localization. Observations beyond `obs_coords.len()`
/// (pseudo-observations appended by augmentation) are not localized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationConfig {
    pub radius: f64,
    pub state_coords: Vec<[f64; 2]>,
    pub obs_coords: Vec<[f64; 2]>,
    /// Domain period along each axis, if periodic.
    #[serde(default)]
    pub periodic: [Option<f64>; 2],
}

impl LocalizationConfig {
    pub fn distance(&self, state: usize, obs: usize) -> f64 {
        let (a, b) = (self.state_coords[state], self.obs_coords[obs]);
        let mut s = 0.0;
        for k in 0..2 {
            let mut d = (a[k] - b[k]).abs();
            if let Some(p) = self.periodic[k] {
                d = d.rem_euclid(p);
                d = d.min(p - d);
            }
            s += d * d;
        }
        s.sqrt()
    }

    fn weight(&self, state: usize, obs: usize) -> f64 {
        if obs >= self.obs_coords.len() {
            1.0
        } else {
            gaspari_cohn(self.distance(state, obs), self.radius)
        }
    }
}

/// LETKF: one ETKF per group of co-located state components with `R⁻¹`
/// tapered by the Gaspari–Cohn weights.
pub fn letkf_analysis(
    ens: &Ensemble,
    obs: &ObservationModel,
    alpha: f64,
    loc: &LocalizationConfig,
) -> Result<Ensemble> {
    check_dim("localization state coordinates", ens.state_dim(), loc.state_coords.len())?;
    if !(loc.radius > 0.0) {
        return Err(Error::InvalidParameter {
            name: "localization radius",
            value: loc.radius,
            reason: "radius must be positive",
        });
    }
    if loc.obs_coords.len() > obs.obs_dim() {
        return Err(Error::DimensionMismatch {
            context: "localization observation coordinates",
            expected: obs.obs_dim(),
            got: loc.obs_coords.len(),
        });
    }
    let rdiag = obs.r.as_diagonal().ok_or_else(|| {
        Error::Unsupported("R-localization requires a diagonal observation covariance".into())
    })?;
    let infl = inflate(ens, alpha)?;
    let os = obs_space(&infl, obs)?;
    let ne = ens.size();
    let mean = infl.mean();
    let anom = ensemble_anomalies(&infl)?;

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut index: HashMap<[u64; 2], usize> = HashMap::new();
    for (i, c) in loc.state_coords.iter().enumerate() {
        let key = [c[0].to_bits(), c[1].to_bits()];
        let g = *index.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }

    let mut out = ens.matrix().clone();
    let no = obs.obs_dim();
    for group in &groups {
        let rep = group[0];
        let mut c = DMatrix::zeros(ne, ne);
        let mut b = DVector::zeros(ne);
        let mut any = false;
        for j in 0..no {
            let w = loc.weight(rep, j);
            if w <= 0.0 {
                continue;
            }
            any = true;
            let q = w / rdiag[j];
            let sj = os.s.row(j);
            for a in 0..ne {
                let qa = q * sj[a];
                b[a] += qa * os.d[j];
                for bb in 0..ne {
                    c[(a, bb)] += qa * sj[bb];
                }
            }
        }
        if !any {
            continue;
        }
        let t = Transform::from_normal(c, &b)?.matrix();
        for &i in group {
            let xi = anom.row(i) * &t;
            for e in 0..ne {
                out[(i, e)] = mean[i] + xi[e];
            }
        }
    }
    Ensemble::new(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KalmanVariant {
    Etkf,
    Etkfp,
    Etkfa,
    Letkf,
    Letkfp,
    Letkfa,
}

impl KalmanVariant {
    pub fn is_local(self) -> bool {
        matches!(self, Self::Letkf | Self::Letkfp | Self::Letkfa)
    }

    pub fn is_projected(self) -> bool {
        matches!(self, Self::Etkfp | Self::Letkfp)
    }

    pub fn is_augmented(self) -> bool {
        matches!(self, Self::Etkfa | Self::Letkfa)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Etkf => "ETKF",
            Self::Etkfp => "ETKFP",
            Self::Etkfa => "ETKFA",
            Self::Letkf => "LETKF",
            Self::Letkfp => "LETKFP",
            Self::Letkfa => "LETKFA",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub variant: KalmanVariant,
    pub inflation: f64,
    pub localization: Option<LocalizationConfig>,
    pub projection: ProjectionConfig,
    pub r_g: Option<DMatrix<f64>>,
}

impl FilterConfig {
    pub fn new(variant: KalmanVariant, inflation: f64) -> Self {
        Self {
            variant,
            inflation,
            localization: None,
            projection: ProjectionConfig::default(),
            r_g: None,
        }
    }
}

fn base_analysis(ens: &Ensemble, obs: &ObservationModel, cfg: &FilterConfig) -> Result<Ensemble> {
    if cfg.variant.is_local() {
        let loc = cfg.localization.as_ref().ok_or_else(|| {
            Error::Unsupported(format!("{} requires a localization configuration", cfg.variant.name()))
        })?;
        letkf_analysis(ens, obs, cfg.inflation, loc)
    } else {
        etkf_analysis(ens, obs, cfg.inflation)
    }
}

/// Projects every member onto its own constraint manifold, anchoring the
/// projection direction at the member itself.
pub fn project_members(
    ens: &Ensemble,
    cs: &MemberConstraints,
    cfg: &ProjectionConfig,
) -> Result<Ensemble> {
    let mut cols = Vec::with_capacity(ens.size());
    for (e, x) in ens.members().enumerate() {
        let p = project_to_manifold(&x, cs.get(e).as_ref(), &x, cfg).map_err(|err| Error::member(e, err))?;
        cols.push(p.x);
    }
    Ensemble::from_columns(&cols)
}

/// Runs any of the six Kalman variants.
pub fn constrained_variant(
    ens: &Ensemble,
    obs: &ObservationModel,
    cfg: &FilterConfig,
    constraints: Option<&MemberConstraints>,
) -> Result<Ensemble> {
    let v = cfg.variant;
    if !(v.is_projected() || v.is_augmented()) {
        return base_analysis(ens, obs, cfg);
    }
    let cs = constraints.ok_or_else(|| {
        Error::Unsupported(format!("{} requires a constraint system", v.name()))
    })?;
    if v.is_projected() {
        let xa = base_analysis(ens, obs, cfg)?;
        return project_members(&xa, cs, &cfg.projection);
    }
    let shared = match (cs.shared(), cs.kind()) {
        (Some(s), ConstraintKind::StateInvariant) => s.clone(),
        _ => {
            return Err(Error::Unsupported(format!(
                "{} needs one constraint system shared by all members; member-specific \
                 forecast-relative constraints cannot be used as pseudo-observations",
                v.name()
            )))
        }
    };
    let r_g = cfg
        .r_g
        .as_ref()
        .ok_or_else(|| Error::Unsupported(format!("{} requires R_g", v.name())))?;
    let aug = augment_observations(obs, shared, r_g)?;
    base_analysis(ens, &aug, cfg)
}
