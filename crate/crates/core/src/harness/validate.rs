//! Quick numerical self-checks of each model, used by `vfpflow validate`.

use std::sync::Arc;

use serde::Serialize;

use crate::constraints::{jacobian_check, ConstraintSystem};
use crate::error::{Error, Result};
use crate::models::kdv::{Kdv, KdvParams};
use crate::models::ns::{NsParams, QgModel};
use crate::models::pendulum::{reference_state, DoublePendulum, PendulumParams};
use crate::models::DynamicalModel;
use crate::rng;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn below(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value.is_finite() && value < threshold,
        }
    }
}

pub const MODELS: [&str; 3] = ["pendulum", "kdv", "ns"];

pub fn validate_model(name: &str) -> Result<Vec<Check>> {
    match name {
        "pendulum" => pendulum(),
        "kdv" => kdv(),
        "ns" => ns(),
        other => Err(Error::Unsupported(format!(
            "unknown model `{other}`; expected one of {}",
            MODELS.join(", ")
        ))),
    }
}

fn pendulum() -> Result<Vec<Check>> {
    let x0 = reference_state();
    let model = DoublePendulum::anchored_at(PendulumParams::default(), &x0);
    let cs = model.constraints();
    let mut checks = vec![
        Check::below("constraint residual at reference state", cs.eval(&x0).amax(), 1e-10),
        Check::below("jacobian vs central differences", jacobian_check(&cs, &x0, 1e-6), 1e-6),
    ];
    let x = model.advance(&x0, 1000)?;
    checks.push(Check::below("max |g| after 1000 steps", cs.eval(&x).amax(), 1e-6));
    Ok(checks)
}

fn kdv() -> Result<Vec<Check>> {
    let model = Kdv::new(KdvParams::default())?;
    let x0 = model.two_soliton();
    let cs = model.constraints(&x0);
    let mut checks = vec![Check::below(
        "jacobian vs central differences",
        jacobian_check(&cs, &x0, 1e-6),
        1e-5,
    )];
    let x = model.advance(&x0, 100)?;
    let g = cs.eval(&x);
    checks.push(Check::below("mass drift after 100 steps", g[0].abs(), 1e-8));
    checks.push(Check::below("momentum drift after 100 steps", g[1].abs(), 1e-8));
    Ok(checks)
}

fn ns() -> Result<Vec<Check>> {
    let model = Arc::new(QgModel::new(NsParams {
        nx: 10,
        ny: 19,
        init_modes: 3,
        ..NsParams::default()
    })?);
    let x = model.spun_up_truth(1, 20);
    let cs = model.constraints(&x)?;
    let n = model.nodes();
    let scale = x.amax();
    let mut checks = vec![Check::below(
        "relative divergence of streamfunction velocities",
        cs.eval(&x).rows(0, n).amax() / scale,
        1e-9,
    )];
    let xp = &x + rng::standard_normal(&[rng::tag::TRUTH, 7], x.len());
    checks.push(Check::below(
        "jacobian vs central differences",
        jacobian_check(&cs, &xp, 1e-6),
        1e-5,
    ));
    let psi = model.poisson_solve(&model.vorticity_from_velocities(&x));
    let omega = model.vorticity_from_velocities(&x);
    let j = model.arakawa(&psi, &omega);
    let (hx, hy) = model.spacing();
    let norm = omega.norm() * j.norm() * hx * hy + f64::MIN_POSITIVE;
    checks.push(Check::below(
        "relative enstrophy production of the Jacobian",
        omega.dot(&j).abs() * hx * hy / norm,
        1e-10,
    ));
    Ok(checks)
}
