//! Evaluation metrics: point-wise, translation and rotation errors, the PCT
//! curve with its AUC, and gap/overlap statistics of adjacent teeth.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::collision::{pairs_collision, GridConfig};
use crate::geometry::{Dentition, PointCloud, RigidMotion, ToothLabel};
use crate::{Error, Result};

/// PCT thresholds run from `PCT_STEP` to `PCT_MAX_K` inclusive.
pub const PCT_STEP: f64 = 0.01;
pub const PCT_MAX_K: f64 = 3.0;
const PCT_COUNT: usize = 300;

/// Pairs with `|c| > GAP_THRESHOLD` are counted as gaps or overlaps.
pub const GAP_THRESHOLD: f64 = 0.5;

fn check_labels<A, B>(a: &BTreeMap<ToothLabel, A>, b: &BTreeMap<ToothLabel, B>) -> Result<()> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::Shape(format!(
            "tooth labels differ: {:?} vs {:?}",
            a.keys().map(|l| l.fdi()).collect::<Vec<_>>(),
            b.keys().map(|l| l.fdi()).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

fn cloud_distance_sum(a: &PointCloud, b: &PointCloud, label: ToothLabel) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "tooth {label}: {} predicted points vs {} target points",
            a.len(),
            b.len()
        )));
    }
    Ok(a.points().iter().zip(b.points()).map(|(p, q)| (p - q).norm()).sum())
}

/// Mean Euclidean distance over every corresponding point of every tooth.
pub fn me_point(predicted: &Dentition, target: &Dentition) -> Result<f64> {
    check_labels(predicted.teeth_map(), target.teeth_map())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in predicted.teeth().zip(target.teeth()) {
        sum += cloud_distance_sum(p.cloud(), t.cloud(), p.label())?;
        count += p.cloud().len();
    }
    if count == 0 {
        return Err(Error::EmptyInput("dentition"));
    }
    Ok(sum / count as f64)
}

/// Per-tooth mean point distance.
pub fn me_point_per_tooth(predicted: &Dentition, target: &Dentition) -> Result<BTreeMap<ToothLabel, f64>> {
    check_labels(predicted.teeth_map(), target.teeth_map())?;
    predicted
        .teeth()
        .zip(target.teeth())
        .map(|(p, t)| {
            let n = p.cloud().len().max(1) as f64;
            Ok((p.label(), cloud_distance_sum(p.cloud(), t.cloud(), p.label())? / n))
        })
        .collect()
}

/// Geodesic angle between two rotations, in degrees; sign-invariant.
pub fn rotation_error_deg(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    (2.0 * dot.abs().min(1.0).acos()).to_degrees()
}

/// Mean translation error (mm) and mean geodesic rotation error (degrees).
///
/// Translations are compared about a common center: each prediction is first
/// re-expressed about the ground-truth motion's center.
pub fn me_trans_rotat(
    predicted: &BTreeMap<ToothLabel, RigidMotion>,
    gt: &BTreeMap<ToothLabel, RigidMotion>,
) -> Result<(f64, f64)> {
    check_labels(predicted, gt)?;
    if gt.is_empty() {
        return Err(Error::EmptyInput("motions"));
    }
    let mut trans = 0.0;
    let mut rot = 0.0;
    for (p, g) in predicted.values().zip(gt.values()) {
        let p = if p.c == g.c { *p } else { p.recentered(g.c) };
        trans += (p.t - g.t).norm();
        rot += rotation_error_deg(&p.q, &g.q);
    }
    let n = gt.len() as f64;
    Ok((trans / n, rot / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PctCurve {
    /// `(K, fraction of errors < K)` for K = 0.01, 0.02, …, 3.00.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

pub fn pct_thresholds() -> impl Iterator<Item = f64> {
    (1..=PCT_COUNT).map(|k| k as f64 / 100.0)
}

pub fn pct_auc(errors: &[f64]) -> Result<PctCurve> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("error list"));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let points: Vec<(f64, f64)> = pct_thresholds()
        .map(|k| (k, sorted.partition_point(|&e| e < k) as f64 / n))
        .collect();
    let auc = 100.0 * points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    Ok(PctCurve { points, auc })
}

/// Which errors the PCT curve counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PctMode {
    #[default]
    PerCase,
    PerTooth,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub mean_abs: f64,
    pub max_abs: f64,
    pub count_over: usize,
    /// Pairs with a measurable collision value.
    pub pairs: usize,
    /// Pairs whose projections share no grid cell.
    pub unsupported: usize,
}

impl GapStats {
    fn from_values(values: &[f64], unsupported: usize) -> GapStats {
        let abs: Vec<f64> = values.iter().map(|c| c.abs()).collect();
        GapStats {
            mean_abs: if abs.is_empty() { 0.0 } else { abs.iter().sum::<f64>() / abs.len() as f64 },
            max_abs: abs.iter().copied().fold(0.0, f64::max),
            count_over: abs.iter().filter(|&&a| a > GAP_THRESHOLD).count(),
            pairs: abs.len(),
            unsupported,
        }
    }

    /// Pools the pair values of several cases.
    pub fn merge(stats: &[(GapStats, Vec<f64>)]) -> GapStats {
        let all: Vec<f64> = stats.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        GapStats::from_values(&all, stats.iter().map(|(s, _)| s.unsupported).sum())
    }
}

/// Collision values of the neighbor pairs, plus their summary.
pub fn gap_values(dentition: &Dentition, grid: GridConfig) -> Result<(GapStats, Vec<f64>)> {
    let clouds: BTreeMap<ToothLabel, PointCloud> =
        dentition.teeth().map(|t| (t.label(), t.cloud().clone())).collect();
    let pairs: Vec<_> = dentition.neighbor_pairs().iter().copied().collect();
    let col = pairs_collision(&clouds, &pairs, grid)?;
    let values: Vec<f64> = col.pairs.iter().map(|p| p.c_uv).collect();
    Ok((GapStats::from_values(&values, col.unsupported.len()), values))
}

pub fn gap_overlap_stats(dentition: &Dentition, grid: GridConfig) -> Result<GapStats> {
    Ok(gap_values(dentition, grid)?.0)
}

/// Metrics of one predicted arrangement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub me_point: f64,
    pub me_trans: f64,
    pub me_rotat: f64,
    pub per_tooth: BTreeMap<ToothLabel, f64>,
    pub gaps: Vec<f64>,
    pub gap_stats: GapStats,
}

/// Scores `predicted` motions applied to `initial` against the target.
pub fn evaluate_case(
    initial: &Dentition,
    predicted: &BTreeMap<ToothLabel, RigidMotion>,
    target: &Dentition,
    gt: &BTreeMap<ToothLabel, RigidMotion>,
    grid: GridConfig,
) -> Result<CaseMetrics> {
    let arranged = initial.moved(predicted)?;
    let (me_trans, me_rotat) = me_trans_rotat(predicted, gt)?;
    let (gap_stats, gaps) = gap_values(&arranged, grid)?;
    Ok(CaseMetrics {
        me_point: me_point(&arranged, target)?,
        me_trans,
        me_rotat,
        per_tooth: me_point_per_tooth(&arranged, target)?,
        gaps,
        gap_stats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: usize,
    pub me_point: f64,
    pub me_trans: f64,
    pub me_rotat: f64,
    pub pct_mode: PctMode,
    pub pct_curve: Vec<(f64, f64)>,
    pub auc: f64,
    pub gap_stats: GapStats,
}

impl EvalReport {
    /// Means over cases; the PCT curve counts per-case or per-tooth errors.
    pub fn from_cases(cases: &[CaseMetrics], mode: PctMode) -> Result<EvalReport> {
        if cases.is_empty() {
            return Err(Error::EmptyInput("cases"));
        }
        let n = cases.len() as f64;
        let mean = |f: fn(&CaseMetrics) -> f64| cases.iter().map(f).sum::<f64>() / n;
        let errors: Vec<f64> = match mode {
            PctMode::PerCase => cases.iter().map(|c| c.me_point).collect(),
            PctMode::PerTooth => cases.iter().flat_map(|c| c.per_tooth.values().copied()).collect(),
        };
        let curve = pct_auc(&errors)?;
        let pooled: Vec<(GapStats, Vec<f64>)> = cases.iter().map(|c| (c.gap_stats, c.gaps.clone())).collect();
        Ok(EvalReport {
            cases: cases.len(),
            me_point: mean(|c| c.me_point),
            me_trans: mean(|c| c.me_trans),
            me_rotat: mean(|c| c.me_rotat),
            pct_mode: mode,
            pct_curve: curve.points,
            auc: curve.auc,
            gap_stats: GapStats::merge(&pooled),
        })
    }
}

pub fn write_pct_csv(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut out = String::from("threshold_mm,fraction\n");
    for (k, f) in curve {
        out.push_str(&format!("{k:.2},{f}\n"));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Tooth, Vec3};
    use crate::synthgen::{generate_neat, ArchSpec};
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;

    fn neat() -> Dentition {
        generate_neat(&ArchSpec {
            points_per_tooth: 128,
            ..ArchSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn me_point_examples() {
        let d = neat();
        assert_eq!(me_point(&d, &d).unwrap(), 0.0);
        let shifted = d.moved_rigidly(&RigidMotion::translation(Vec3::new(0.0, 1.0, 0.0))).unwrap();
        assert!((me_point(&shifted, &d).unwrap() - 1.0).abs() < 1e-12);
        let fewer = Dentition::new(d.teeth().skip(1).cloned()).unwrap();
        assert!(matches!(me_point(&fewer, &d), Err(Error::Shape(_))));
    }

    #[test]
    fn me_point_rejects_mismatched_point_counts() {
        let a = Tooth::new(ToothLabel::new(11).unwrap(), PointCloud::from_xyz(&[[0.0; 3]]).unwrap()).unwrap();
        let b = Tooth::new(ToothLabel::new(11).unwrap(), PointCloud::from_xyz(&[[0.0; 3], [1.0; 3]]).unwrap()).unwrap();
        let r = me_point(&Dentition::new([a]).unwrap(), &Dentition::new([b]).unwrap());
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    fn motions(ms: &[RigidMotion]) -> BTreeMap<ToothLabel, RigidMotion> {
        ms.iter().zip([11, 12, 13]).map(|(m, l)| (ToothLabel::new(l).unwrap(), *m)).collect()
    }

    #[test]
    fn trans_rotat_examples() {
        let id = motions(&[RigidMotion::identity(); 2]);
        assert_eq!(me_trans_rotat(&id, &id).unwrap(), (0.0, 0.0));
        let t = motions(&[RigidMotion::translation(Vec3::new(3.0, 4.0, 0.0)); 2]);
        assert!((me_trans_rotat(&t, &id).unwrap().0 - 5.0).abs() < 1e-12);
        let rz = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), 10f64.to_radians());
        let r = motions(&[RigidMotion::from_rotation(&rz, Vec3::zeros(), Vec3::zeros())]);
        let one = motions(&[RigidMotion::identity()]);
        assert!((me_trans_rotat(&r, &one).unwrap().1 - 10.0).abs() < 1e-6);
        assert!(matches!(me_trans_rotat(&id, &one), Err(Error::Shape(_))));
    }

    #[test]
    fn translation_error_is_center_independent() {
        let q = UnitQuaternion::from_axis_angle(&Vec3::x_axis(), 0.4);
        let gt = RigidMotion::from_rotation(&q, Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 3.0, 4.0));
        let same = gt.recentered(Vec3::new(-5.0, 0.0, 1.0));
        let (t, r) = me_trans_rotat(&motions(&[same]), &motions(&[gt])).unwrap();
        assert!(t < 1e-9 && r < 1e-6);
    }

    #[test]
    fn pct_examples() {
        let c = pct_auc(&[0.0, 0.0]).unwrap();
        assert!((c.auc - 100.0).abs() < 1e-12);
        assert_eq!(c.points.len(), 300);
        assert!((c.points[0].0 - 0.01).abs() < 1e-15 && c.points[299].0 == 3.0);
        assert_eq!(pct_auc(&[3.5, 4.0]).unwrap().auc, 0.0);
        assert!(matches!(pct_auc(&[]), Err(Error::EmptyInput(_))));
        // error exactly at a threshold is not counted there
        let c = pct_auc(&[0.5]).unwrap();
        assert_eq!(c.points[49].1, 0.0);
        assert_eq!(c.points[50].1, 1.0);
    }

    /// Direct summation over thresholds and errors.
    fn brute_auc(errors: &[f64]) -> f64 {
        let mut total = 0.0;
        for k in 1..=300 {
            let thr = k as f64 * 0.01;
            let hits = errors.iter().filter(|&&e| e < thr).count();
            total += hits as f64 / errors.len() as f64;
        }
        100.0 * total / 300.0
    }

    #[test]
    fn pct_two_errors_matches_brute_force() {
        let c = pct_auc(&[0.5, 2.5]).unwrap();
        assert!((c.auc - brute_auc(&[0.5, 2.5])).abs() < 1e-9);
        // thresholds 0.51..=2.50 see one error, 2.51..=3.00 see both
        assert!((c.auc - 100.0 * (200.0 * 0.5 + 50.0) / 300.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force(errors in prop::collection::vec(0.0f64..4.0, 1..40)) {
            let c = pct_auc(&errors).unwrap();
            prop_assert!((c.auc - brute_auc(&errors)).abs() < 1e-9);
            prop_assert!(c.points.windows(2).all(|w| w[0].1 <= w[1].1));
            prop_assert!((0.0..=100.0).contains(&c.auc));
        }

        #[test]
        fn rotation_error_sign_invariant(
            axis in prop::array::uniform3(-1.0f64..1.0),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            prop_assume!(Vec3::from(axis).norm() > 1e-3);
            let ax = nalgebra::Unit::new_normalize(Vec3::from(axis));
            let qa = UnitQuaternion::from_axis_angle(&ax, a);
            let qb = UnitQuaternion::from_axis_angle(&ax, b);
            let arr = |q: &UnitQuaternion<f64>| [q.w, q.i, q.j, q.k];
            let neg = |q: [f64; 4]| q.map(|x| -x);
            let e = rotation_error_deg(&arr(&qa), &arr(&qb));
            prop_assert!(e >= 0.0);
            prop_assert!((e - rotation_error_deg(&neg(arr(&qa)), &arr(&qb))).abs() < 1e-9);
            prop_assert!((e - rotation_error_deg(&arr(&qa), &neg(arr(&qb)))).abs() < 1e-9);
            // geodesic oracle: the angle of qa⁻¹·qb
            prop_assert!((e - qa.angle_to(&qb).to_degrees()).abs() < 1e-6);
        }
    }

    #[test]
    fn neat_dentition_gap_stats() {
        let d = generate_neat(&ArchSpec::default()).unwrap();
        let g = gap_overlap_stats(&d, GridConfig::default()).unwrap();
        assert_eq!(g.count_over, 0);
        assert!(g.max_abs <= 0.6, "{g:?}");
        assert_eq!(g.pairs + g.unsupported, 26);
    }

    #[test]
    fn one_separated_pair_is_counted() {
        let d = generate_neat(&ArchSpec::default()).unwrap();
        let l17 = ToothLabel::new(17).unwrap();
        let t = d.get(l17).unwrap();
        let neighbor = d.get(ToothLabel::new(16).unwrap()).unwrap();
        let away = (t.barycenter() - neighbor.barycenter()).normalize();
        let mut d = d.clone();
        d.replace(t.moved(&RigidMotion::translation(away * 1.0)).unwrap()).unwrap();
        let g = gap_overlap_stats(&d, GridConfig::default()).unwrap();
        assert_eq!(g.count_over, 1, "{g:?}");
    }

    #[test]
    fn gap_stats_invariant_under_global_motion() {
        let d = generate_neat(&ArchSpec::default()).unwrap();
        let grid = GridConfig::default();
        let a = gap_overlap_stats(&d, grid).unwrap();
        // The grid frame is built from the coordinate axis least aligned with
        // each pair's normal (z for every neighbor pair here), so translations
        // and rotations about z carry the grid along exactly.
        let q = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), 0.7);
        let m = RigidMotion::from_rotation(&q, Vec3::new(5.0, -2.0, 3.0), Vec3::new(1.0, 1.0, 1.0));
        let b = gap_overlap_stats(&d.moved_rigidly(&m).unwrap(), grid).unwrap();
        assert_eq!(a.count_over, b.count_over);
        assert!((a.mean_abs - b.mean_abs).abs() < 1e-9 && (a.max_abs - b.max_abs).abs() < 1e-9);
        // A general rotation re-grids each pair; values move by at most the interval.
        let q = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        let m = RigidMotion::from_rotation(&q, Vec3::zeros(), Vec3::zeros());
        let c = gap_overlap_stats(&d.moved_rigidly(&m).unwrap(), grid).unwrap();
        assert_eq!(a.count_over, c.count_over);
        assert!((a.max_abs - c.max_abs).abs() <= grid.interval);
    }

    #[test]
    fn report_from_cases_and_csv() {
        let d = neat();
        let gt: BTreeMap<_, _> = d.labels().map(|l| (l, RigidMotion::identity())).collect();
        let m = evaluate_case(&d, &gt, &d, &gt, GridConfig::default()).unwrap();
        assert_eq!((m.me_point, m.me_trans, m.me_rotat), (0.0, 0.0, 0.0));
        let r = EvalReport::from_cases(&[m.clone(), m], PctMode::PerTooth).unwrap();
        assert!((r.auc - 100.0).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pct.csv");
        write_pct_csv(&path, &r.pct_curve).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 301);
        assert_eq!(text.lines().nth(1), Some("0.01,1"));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
    }
}
