use nalgebra::{Matrix3, Quaternion, Unit, UnitQuaternion};
use serde::{Deserialize, Serialize};

use super::{PointCloud, Vec3};
use crate::{Error, Result};

/// Tolerance on `|‖q‖ - 1|` accepted by [`RigidMotion`].
pub const QUAT_UNIT_TOL: f64 = 1e-6;

const QUAT_EPS: f64 = 1e-8;

/// Scales `raw` (w, x, y, z) to unit length with the sign chosen so that `w >= 0`.
pub fn quat_normalize(raw: [f64; 4]) -> Result<[f64; 4]> {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > QUAT_EPS) {
        return Err(Error::DegenerateQuaternion(norm));
    }
    let s = if raw[0] < 0.0 { -1.0 / norm } else { 1.0 / norm };
    Ok(raw.map(|v| v * s))
}

/// Rotation about `center` followed by translation:
/// `p ↦ R(q)·(p − c) + c + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidMotion {
    /// Unit quaternion `(w, x, y, z)`.
    pub q: [f64; 4],
    pub t: Vec3,
    pub c: Vec3,
}

impl RigidMotion {
    pub fn identity() -> Self {
        RigidMotion {
            q: [1.0, 0.0, 0.0, 0.0],
            t: Vec3::zeros(),
            c: Vec3::zeros(),
        }
    }

    pub fn new(q: [f64; 4], t: Vec3, c: Vec3) -> Result<Self> {
        let m = RigidMotion { q, t, c };
        m.validate()?;
        Ok(m)
    }

    pub fn translation(t: Vec3) -> Self {
        RigidMotion {
            t,
            ..Self::identity()
        }
    }

    /// Builds a motion from a rotation, storing the quaternion with `w >= 0`.
    pub fn from_rotation(rotation: &UnitQuaternion<f64>, t: Vec3, c: Vec3) -> Self {
        let q = rotation.quaternion();
        let mut arr = [q.w, q.i, q.j, q.k];
        if arr[0] < 0.0 {
            arr = arr.map(|v| -v);
        }
        RigidMotion { q: arr, t, c }
    }

    pub fn validate(&self) -> Result<()> {
        let norm = self.q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= QUAT_UNIT_TOL) || !self.t.iter().chain(self.c.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidMotion(norm));
        }
        Ok(())
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.q;
        Unit::new_normalize(Quaternion::new(w, x, y, z))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation().to_rotation_matrix().into_inner()
    }

    /// Rotation angle in degrees, in `[0, 180]`.
    pub fn angle_deg(&self) -> f64 {
        self.rotation().angle().to_degrees()
    }

    pub fn is_identity(&self) -> bool {
        self.q == [1.0, 0.0, 0.0, 0.0] && self.t == Vec3::zeros()
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation_matrix() * (p - self.c) + self.c + self.t
    }

    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        self.validate()?;
        if self.is_identity() {
            return Ok(cloud.clone());
        }
        let r = self.rotation_matrix();
        let offset = self.c + self.t;
        Ok(PointCloud::from_points_unchecked(
            cloud.points().iter().map(|p| r * (p - self.c) + offset).collect(),
        ))
    }

    /// The motion undoing `self`.
    pub fn inverse(&self) -> RigidMotion {
        let inv = self.rotation().inverse();
        RigidMotion::from_rotation(&inv, -self.t, self.c + self.t)
    }

    /// `self` followed by `next`, expressed about `self.c`.
    pub fn then(&self, next: &RigidMotion) -> RigidMotion {
        let r1 = self.rotation();
        let r2 = next.rotation();
        let r = r2 * r1;
        // p ↦ R2(R1(p − c1) + c1 + t1 − c2) + c2 + t2
        let t = r2 * (self.c + self.t - next.c) + next.c + next.t - self.c;
        RigidMotion::from_rotation(&r, t, self.c)
    }

    /// Same mapping expressed with a different rotation center.
    pub fn recentered(&self, center: Vec3) -> RigidMotion {
        let r = self.rotation_matrix();
        let t = self.t + (self.c - center) - r * (self.c - center);
        RigidMotion {
            q: self.q,
            t,
            c: center,
        }
    }
}
