//! Gradient descent on the translation of one cloud until it touches another.

use arrange_core::collision::{collide, collision_backward, CollisionReport};
use arrange_core::geometry::{PointCloud, Vec3};
use serde::{Deserialize, Serialize};

use crate::config::AttachConfig;
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttachStep {
    pub iter: usize,
    pub c: f64,
    /// Translation applied to `v` so far.
    pub translation: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttachOutcome {
    pub converged: bool,
    /// Gradient steps taken.
    pub iterations: usize,
    pub initial_c: f64,
    pub final_c: f64,
    pub translation: [f64; 3],
    /// Final translation projected on the initial mid-plane normal.
    pub displacement_along_normal: f64,
    pub steps: Vec<AttachStep>,
    #[serde(skip)]
    pub initial: Option<CollisionReport>,
    #[serde(skip)]
    pub last: Option<CollisionReport>,
}

fn guided(e: arrange_core::Error) -> CliError {
    let hint = match e {
        arrange_core::Error::DegeneratePair(_) => {
            "the clouds share a barycenter, so the separating axis is undefined; offset one cloud before attaching"
        }
        arrange_core::Error::NoOverlapSupport => {
            "the clouds do not face each other within the grid; move them closer or raise the grid interval/resolution"
        }
        other => return other.into(),
    };
    CliError::Guided { source: e, hint }
}

/// Minimizes `c²` over the translation of `v` with plain gradient descent.
///
/// `|c| < tol` is tested before every step, so already attached inputs take
/// zero iterations.
pub fn attach(u: &PointCloud, v: &PointCloud, cfg: &AttachConfig) -> Result<AttachOutcome> {
    let mut t = Vec3::zeros();
    let mut steps = Vec::new();
    let mut initial = None;
    let mut iter = 0;
    let (report, converged) = loop {
        let report = collide(u, &v.translated(&t), cfg.grid).map_err(guided)?;
        if !report.c_uv.is_finite() {
            return Err(arrange_core::Error::NonFinite.into());
        }
        steps.push(AttachStep {
            iter,
            c: report.c_uv,
            translation: t.into(),
        });
        if initial.is_none() {
            initial = Some(report.clone());
        }
        if report.c_uv.abs() < cfg.tol {
            break (report, true);
        }
        if iter == cfg.max_iters {
            break (report, false);
        }
        let (_, grad_v) = collision_backward(&report);
        let g: Vec3 = grad_v.iter().sum();
        t -= cfg.lr * g;
        iter += 1;
    };
    let initial = initial.expect("at least one evaluation");
    Ok(AttachOutcome {
        converged,
        iterations: iter,
        initial_c: initial.c_uv,
        final_c: report.c_uv,
        translation: t.into(),
        displacement_along_normal: t.dot(&initial.plane.normal),
        steps,
        initial: Some(initial),
        last: Some(report),
    })
}

pub fn trajectory_csv(steps: &[AttachStep]) -> String {
    let mut out = String::from("iter,c,tx,ty,tz\n");
    for s in steps {
        let [x, y, z] = s.translation;
        out.push_str(&format!("{},{},{x},{y},{z}\n", s.iter, s.c));
    }
    out
}
