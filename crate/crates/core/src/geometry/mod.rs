//! Point clouds, FDI labels, rigid motions and dentition scenes.
//!
//! All lengths are millimetres.

mod dentition;
mod fps;
mod label;
mod motion;

pub use dentition::{normalize_case, Dentition};
pub use fps::{fps_indices, fps_sample};
pub use label::{ArchSide, Category, Jaw, ToothLabel};
pub use motion::{quat_normalize, RigidMotion, QUAT_UNIT_TOL};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Ordered list of 3D points.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite);
        }
        Ok(PointCloud { points })
    }

    pub fn from_xyz(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| Vec3::from(*p)).collect())
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Cloud built from the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn translated(&self, offset: &Vec3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| p + offset).collect(),
        }
    }

    pub(crate) fn from_points_unchecked(points: Vec<Vec3>) -> Self {
        PointCloud { points }
    }
}

pub fn barycenter(cloud: &PointCloud) -> Result<Vec3> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("point cloud"));
    }
    let sum = cloud.points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
    Ok(sum / cloud.len() as f64)
}

/// A labeled tooth with its cached barycenter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tooth {
    label: ToothLabel,
    cloud: PointCloud,
    barycenter: Vec3,
}

impl Tooth {
    pub fn new(label: ToothLabel, cloud: PointCloud) -> Result<Self> {
        let barycenter = barycenter(&cloud)?;
        Ok(Tooth {
            label,
            cloud,
            barycenter,
        })
    }

    pub fn label(&self) -> ToothLabel {
        self.label
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn barycenter(&self) -> Vec3 {
        self.barycenter
    }

    /// Same tooth with its cloud replaced (barycenter recomputed).
    pub fn with_cloud(&self, cloud: PointCloud) -> Result<Tooth> {
        Tooth::new(self.label, cloud)
    }

    pub fn moved(&self, motion: &RigidMotion) -> Result<Tooth> {
        Tooth::new(self.label, motion.apply(&self.cloud)?)
    }
}

/// The tooth cloud expressed relative to its barycenter.
pub fn center_cloud(tooth: &Tooth) -> PointCloud {
    let c = tooth.barycenter;
    let mut points: Vec<Vec3> = tooth.cloud.points.iter().map(|p| p - c).collect();
    // Re-centre once more so floating-point residue of the first pass stays below 1e-9.
    let residue = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64;
    for p in &mut points {
        *p -= residue;
    }
    PointCloud { points }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn barycenter_examples() {
        let c = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(barycenter(&c).unwrap(), Vec3::new(1.0, 0.0, 0.0));
        let c = PointCloud::from_xyz(&[[1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(barycenter(&c).unwrap(), Vec3::new(1.0, 1.0, 1.0));
        assert!(matches!(barycenter(&PointCloud::default()), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn barycenter_of_sampled_box_matches_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<[f64; 3]> = (0..512)
            .map(|_| {
                [
                    5.0 + rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ]
            })
            .collect();
        // independent oracle: plain summation over the generated array
        let mut oracle = [0.0; 3];
        for p in &pts {
            for k in 0..3 {
                oracle[k] += p[k] / pts.len() as f64;
            }
        }
        let b = barycenter(&PointCloud::from_xyz(&pts).unwrap()).unwrap();
        for k in 0..3 {
            assert!((b[k] - oracle[k]).abs() < 1e-12);
        }
        assert!((b - Vec3::new(5.0, 0.0, 0.0)).norm() < 0.05);
    }

    #[test]
    fn non_finite_points_rejected() {
        assert!(matches!(
            PointCloud::from_xyz(&[[f64::NAN, 0.0, 0.0]]),
            Err(Error::NonFinite)
        ));
    }

    #[test]
    fn center_cloud_examples() {
        let label = ToothLabel::new(11).unwrap();
        let t = Tooth::new(label, PointCloud::from_xyz(&[[2.0, 0.0, 0.0], [4.0, 0.0, 0.0]]).unwrap()).unwrap();
        let c = center_cloud(&t);
        assert_eq!(c, PointCloud::from_xyz(&[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap());
        let again = center_cloud(&Tooth::new(label, c.clone()).unwrap());
        assert_eq!(again, c);
    }

    proptest! {
        #[test]
        fn centered_cloud_has_zero_barycenter(
            pts in prop::collection::vec(prop::array::uniform3(-50.0f64..50.0), 1..64)
        ) {
            let tooth = Tooth::new(ToothLabel::new(21).unwrap(), PointCloud::from_xyz(&pts).unwrap()).unwrap();
            let b = barycenter(&center_cloud(&tooth)).unwrap();
            prop_assert!(b.norm() < 1e-9);
        }
    }
}
