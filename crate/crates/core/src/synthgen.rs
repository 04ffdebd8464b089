//! Synthetic dentitions: box-shaped teeth placed along a superellipse arch,
//! random malocclusion with exact ground-truth motions, staging interpolation
//! and training-time augmentation.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Unit, UnitQuaternion, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    fps_indices, normalize_case, ArchSide, Dentition, Jaw, PointCloud, RigidMotion, Tooth, ToothLabel, Vec3,
};
use crate::io::{self, CaseManifest, ManifestEntry};
use crate::{Error, Result};

/// Box dimensions of one tooth type, in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToothDims {
    /// Mesio-distal size (along the arch).
    pub width: f64,
    /// Bucco-lingual size.
    pub depth: f64,
    pub height: f64,
}

const fn dims(width: f64, depth: f64, height: f64) -> ToothDims {
    ToothDims { width, depth, height }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchSpec {
    /// Lateral half-width of the arch curve on the `-x` side (quadrants 1/4).
    pub half_width_left: f64,
    /// Lateral half-width on the `+x` side (quadrants 2/3).
    pub half_width_right: f64,
    /// Anterior depth of the arch curve.
    pub depth: f64,
    /// Superellipse exponent of the arch curve.
    pub exponent: f64,
    /// Tooth boxes by FDI position 1..=7 (index 0 = central incisor).
    pub teeth: [ToothDims; 7],
    /// Lower crowns are `lower_height_scale` times the upper ones.
    pub lower_height_scale: f64,
    /// Vertical gap between the occlusal faces of the two jaws.
    pub jaw_separation: f64,
    pub points_per_tooth: usize,
    pub seed: u64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            half_width_left: 25.0,
            half_width_right: 25.0,
            depth: 46.0,
            exponent: 2.5,
            teeth: [
                dims(8.0, 7.0, 10.0),
                dims(6.5, 6.0, 9.0),
                dims(7.5, 8.0, 10.0),
                dims(7.0, 9.0, 8.0),
                dims(6.5, 9.0, 7.5),
                dims(10.0, 11.0, 7.0),
                dims(9.0, 10.5, 6.5),
            ],
            lower_height_scale: 0.9,
            jaw_separation: 0.0,
            points_per_tooth: 512,
            seed: 0,
        }
    }
}

impl ArchSpec {
    fn validate(&self) -> Result<()> {
        let positive = [
            self.half_width_left,
            self.half_width_right,
            self.depth,
            self.exponent,
            self.lower_height_scale,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || self.teeth.iter().any(|d| !(d.width > 0.0 && d.depth > 0.0 && d.height > 0.0))
        {
            return Err(Error::InfeasibleSpec("all sizes must be positive".into()));
        }
        if !(self.jaw_separation.is_finite() && self.jaw_separation >= 0.0) {
            return Err(Error::InfeasibleSpec("jaw separation must be >= 0".into()));
        }
        if self.points_per_tooth < 8 {
            return Err(Error::InfeasibleSpec("need at least 8 points per tooth".into()));
        }
        Ok(())
    }

    pub fn is_symmetric(&self) -> bool {
        self.half_width_left == self.half_width_right
    }
}

/// Oriented rectangle in the occlusal (x, y) plane.
#[derive(Clone, Copy, Debug)]
struct Footprint {
    center: Vector2<f64>,
    /// Unit mesio-distal axis.
    axis: Vector2<f64>,
    half_w: f64,
    half_d: f64,
}

impl Footprint {
    fn normal(&self) -> Vector2<f64> {
        Vector2::new(-self.axis.y, self.axis.x)
    }

    fn corners(&self) -> [Vector2<f64>; 4] {
        let a = self.axis * self.half_w;
        let b = self.normal() * self.half_d;
        [self.center + a + b, self.center + a - b, self.center - a + b, self.center - a - b]
    }

    /// Separating-axis test; touching rectangles do not overlap.
    fn overlaps(&self, other: &Footprint) -> bool {
        let (ca, cb) = (self.corners(), other.corners());
        for axis in [self.axis, self.normal(), other.axis, other.normal()] {
            let proj = |cs: &[Vector2<f64>; 4]| {
                cs.iter()
                    .map(|c| c.dot(&axis))
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
            };
            let (a0, a1) = proj(&ca);
            let (b0, b1) = proj(&cb);
            if a1 <= b0 || b1 <= a0 {
                return false;
            }
        }
        true
    }
}

struct ArchCurve {
    sign: f64,
    half_width: f64,
    depth: f64,
    exponent: f64,
}

impl ArchCurve {
    /// Point at angle parameter `phi ∈ [0, π/2]`; 0 is the midline, π/2 the distal end.
    fn point(&self, phi: f64) -> Vector2<f64> {
        let e = 2.0 / self.exponent;
        let (s, c) = phi.sin_cos();
        Vector2::new(
            self.sign * self.half_width * s.abs().powf(e) * s.signum(),
            self.depth * c.abs().powf(e),
        )
    }

    fn footprint(&self, phi: f64, d: &ToothDims) -> Footprint {
        let h = 1e-6;
        let tangent = (self.point(phi + h) - self.point(phi - h)).normalize();
        // Labial normal points out of the arch; choose the axis so that it is
        // the rectangle's left-hand normal.
        let labial = Vector2::new(-tangent.y, tangent.x) * self.sign;
        let axis = Vector2::new(labial.y, -labial.x);
        Footprint {
            center: self.point(phi),
            axis,
            half_w: d.width / 2.0,
            half_d: d.depth / 2.0,
        }
    }
}

fn bisect(mut lo: f64, mut hi: f64, mut below: impl FnMut(f64) -> bool) -> f64 {
    // Invariant: below(lo) is true, below(hi) is false.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if below(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Footprints of positions 1..=7 on one side, each touching its mesial neighbor
/// (the first touches the midline x = 0).
fn place_side(curve: &ArchCurve, teeth: &[ToothDims; 7]) -> Result<Vec<Footprint>> {
    let infeasible = |pos: usize| {
        Error::InfeasibleSpec(format!(
            "tooth position {pos} does not fit on an arch of half-width {} mm",
            curve.half_width
        ))
    };
    let crosses_midline = |phi: f64| {
        let fp = curve.footprint(phi, &teeth[0]);
        fp.corners().iter().map(|c| c.x * curve.sign).fold(f64::INFINITY, f64::min) < 0.0
    };
    if crosses_midline(FRAC_PI_2) {
        return Err(infeasible(1));
    }
    let mut phi = bisect(0.0, FRAC_PI_2, crosses_midline);
    let mut out = vec![curve.footprint(phi, &teeth[0])];
    for (k, d) in teeth.iter().enumerate().skip(1) {
        let prev = *out.last().unwrap();
        let hits_prev = |p: f64| curve.footprint(p, d).overlaps(&prev);
        if hits_prev(FRAC_PI_2) {
            return Err(infeasible(k + 1));
        }
        phi = bisect(phi, FRAC_PI_2, hits_prev);
        out.push(curve.footprint(phi, d));
    }
    Ok(out)
}

/// Area-weighted uniform samples on the surface of an axis-aligned box
/// centred at the origin.
pub fn box_surface(half: Vec3, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut axis = 2;
            for (k, a) in areas.iter().enumerate() {
                if pick < *a {
                    axis = k;
                    break;
                }
                pick -= a;
            }
            let mut p = Vec3::new(
                rng.random_range(-half.x..=half.x),
                rng.random_range(-half.y..=half.y),
                rng.random_range(-half.z..=half.z),
            );
            p[axis] = if rng.random::<bool>() { half[axis] } else { -half[axis] };
            p
        })
        .collect()
}

/// Surface samples of an L-shaped prism: the union of a `long` box and a
/// `short` box stacked on one of its ends. Points interior to the union are
/// discarded.
pub fn l_shape_surface(long: Vec3, short: Vec3, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    // long box centred at origin; short box sits on top (+z) of the +x end
    let short_center = Vec3::new(long.x - short.x, 0.0, long.z + short.z);
    let inside = |p: &Vec3, c: &Vec3, h: &Vec3| (0..3).all(|k| (p[k] - c[k]).abs() < h[k] - 1e-12);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        for p in box_surface(long, 64, rng) {
            if !inside(&p, &short_center, &short) {
                out.push(p);
            }
        }
        for p in box_surface(short, 32, rng) {
            let q = p + short_center;
            if !inside(&q, &Vec3::zeros(), &long) && !(q.z - long.z).abs().lt(&1e-12) {
                out.push(q);
            }
        }
    }
    out.truncate(n);
    out
}

/// Mirror-image teeth share one stream so the dentition is exactly symmetric.
fn tooth_rng(seed: u64, jaw: Jaw, position: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((jaw == Jaw::Upper) as u64) << 8 | position as u64);
    rng
}

/// Samples `n` well-spread points on a box surface: 4n random samples thinned
/// by farthest-point sampling.
fn sample_tooth_surface(half: Vec3, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let raw = PointCloud::new(box_surface(half, 4 * n, rng)).expect("finite samples");
    let idx = fps_indices(&raw, n).expect("4n >= n");
    idx.into_iter().map(|i| raw.points()[i]).collect()
}

/// Neat target dentition: 28 teeth, neighbors touching along the arch and
/// opposing teeth touching across the occlusal plane, normalized so the
/// central-incisor centroid is the origin.
pub fn generate_neat(spec: &ArchSpec) -> Result<Dentition> {
    spec.validate()?;
    let mut teeth = Vec::with_capacity(28);
    for side in [ArchSide::Left, ArchSide::Right] {
        let (sign, half_width) = match side {
            ArchSide::Left => (-1.0, spec.half_width_left),
            ArchSide::Right => (1.0, spec.half_width_right),
        };
        let curve = ArchCurve {
            sign,
            half_width,
            depth: spec.depth,
            exponent: spec.exponent,
        };
        let footprints = place_side(&curve, &spec.teeth)?;
        for jaw in [Jaw::Upper, Jaw::Lower] {
            let quadrant = match (jaw, side) {
                (Jaw::Upper, ArchSide::Left) => 1,
                (Jaw::Upper, ArchSide::Right) => 2,
                (Jaw::Lower, ArchSide::Right) => 3,
                (Jaw::Lower, ArchSide::Left) => 4,
            };
            for (k, fp) in footprints.iter().enumerate() {
                let label = ToothLabel::from_parts(quadrant, k as u8 + 1)?;
                let d = spec.teeth[k];
                let (height, z) = match jaw {
                    Jaw::Upper => (d.height, spec.jaw_separation / 2.0 + d.height / 2.0),
                    Jaw::Lower => {
                        let h = d.height * spec.lower_height_scale;
                        (h, -spec.jaw_separation / 2.0 - h / 2.0)
                    }
                };
                let half = Vec3::new(d.width / 2.0, d.depth / 2.0, height / 2.0);
                let yaw = fp.axis.y.atan2(fp.axis.x);
                let rot = Rotation3::from_axis_angle(&Vec3::z_axis(), yaw);
                let center = Vec3::new(fp.center.x, fp.center.y, z);
                let mut rng = tooth_rng(spec.seed, jaw, k as u8 + 1);
                let pts = sample_tooth_surface(half, spec.points_per_tooth, &mut rng)
                    .into_iter()
                    .map(|p| rot * Vec3::new(sign * p.x, p.y, p.z) + center)
                    .collect();
                teeth.push(Tooth::new(label, PointCloud::new(pts)?)?);
            }
        }
    }
    let (normalized, _) = normalize_case(&Dentition::new(teeth)?)?;
    Ok(normalized)
}

const ARCH_LEFT: [u32; 6] = [14, 15, 16, 44, 45, 46];
const ARCH_RIGHT: [u32; 6] = [24, 25, 26, 34, 35, 36];

/// Signed distances (mm, along `+x`) of premolar and first-molar barycenters
/// to the midsagittal plane `x = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchWidthVector {
    /// Teeth 14, 15, 16, 24, 25, 26.
    pub up: [f64; 6],
    /// Teeth 34, 35, 36, 44, 45, 46.
    pub low: [f64; 6],
}

impl ArchWidthVector {
    pub const UPPER: [u32; 6] = [14, 15, 16, 24, 25, 26];
    pub const LOWER: [u32; 6] = [34, 35, 36, 44, 45, 46];

    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        out[..6].copy_from_slice(&self.up);
        out[6..].copy_from_slice(&self.low);
        out
    }

    fn labeled(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        Self::UPPER
            .iter()
            .copied()
            .zip(self.up.iter().copied())
            .chain(Self::LOWER.iter().copied().zip(self.low.iter().copied()))
    }

    fn map_labeled(&self, f: impl Fn(u32, f64) -> f64) -> ArchWidthVector {
        let mut out = *self;
        for (k, &l) in Self::UPPER.iter().enumerate() {
            out.up[k] = f(l, self.up[k]);
        }
        for (k, &l) in Self::LOWER.iter().enumerate() {
            out.low[k] = f(l, self.low[k]);
        }
        out
    }

    /// Widens the left half (teeth 14–16, 44–46) by `delta_left` and the right
    /// half by `delta_right`; negative offsets contract.
    pub fn with_offset(&self, delta_left: f64, delta_right: f64) -> ArchWidthVector {
        self.map_labeled(|l, x| {
            if ARCH_LEFT.contains(&l) {
                x - delta_left
            } else {
                x + delta_right
            }
        })
    }

    /// Mean distance to the midsagittal plane of the left-half entries.
    pub fn left_width(&self) -> f64 {
        self.labeled().filter(|(l, _)| ARCH_LEFT.contains(l)).map(|(_, x)| -x).sum::<f64>() / 6.0
    }

    pub fn right_width(&self) -> f64 {
        self.labeled().filter(|(l, _)| ARCH_RIGHT.contains(l)).map(|(_, x)| x).sum::<f64>() / 6.0
    }

    pub fn total_width(&self) -> f64 {
        self.left_width() + self.right_width()
    }
}

pub fn arch_width_of(dentition: &Dentition) -> Result<ArchWidthVector> {
    let x = |fdi: u32| -> Result<f64> {
        let label = ToothLabel::new(fdi)?;
        Ok(dentition.get(label).ok_or(Error::MissingAnchor(label))?.barycenter().x)
    };
    let mut v = ArchWidthVector {
        up: [0.0; 6],
        low: [0.0; 6],
    };
    for k in 0..6 {
        v.up[k] = x(ArchWidthVector::UPPER[k])?;
        v.low[k] = x(ArchWidthVector::LOWER[k])?;
    }
    Ok(v)
}

/// One training/evaluation case.
#[derive(Clone, Debug)]
pub struct CaseRecord {
    pub initial: Dentition,
    pub target: Dentition,
    /// Motions mapping each initial tooth onto its target pose, centred at the
    /// initial barycenter.
    pub gt_motions: BTreeMap<ToothLabel, RigidMotion>,
    pub arch_width: ArchWidthVector,
}

impl CaseRecord {
    /// Largest point-wise deviation between `gt_motions(initial)` and `target`.
    pub fn round_trip_error(&self) -> Result<f64> {
        let moved = self.initial.moved(&self.gt_motions)?;
        let mut worst: f64 = 0.0;
        for (a, b) in moved.teeth().zip(self.target.teeth()) {
            for (p, q) in a.cloud().points().iter().zip(b.cloud().points()) {
                worst = worst.max((p - q).norm());
            }
        }
        Ok(worst)
    }
}

/// Perturbation magnitudes at severity 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MalocclusionParams {
    pub max_angle_deg: f64,
    /// Per-axis standard deviation of the translation (mm).
    pub translation_sigma: f64,
}

impl Default for MalocclusionParams {
    fn default() -> Self {
        MalocclusionParams {
            max_angle_deg: 30.0,
            translation_sigma: 1.0,
        }
    }
}

impl MalocclusionParams {
    /// Translation spread raised so that severity-1 cases start about 2.8 mm
    /// (mean point error) from their targets.
    pub fn calibrated() -> Self {
        MalocclusionParams {
            translation_sigma: 1.6,
            ..Self::default()
        }
    }
}

fn random_axis(rng: &mut impl Rng) -> Unit<Vec3> {
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if v.norm() > 1e-9 {
            return Unit::new_normalize(v);
        }
    }
}

/// Random rigid perturbation about `center`: uniform axis, angle uniform in
/// `±max_angle_deg`, translation `N(0, sigma²)` per axis.
fn random_perturbation(center: Vec3, max_angle_deg: f64, sigma: f64, rng: &mut impl Rng) -> RigidMotion {
    let axis = random_axis(rng);
    let max = max_angle_deg.to_radians();
    let angle = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
    let t = Vec3::new(
        rng.sample::<f64, _>(StandardNormal) * sigma,
        rng.sample::<f64, _>(StandardNormal) * sigma,
        rng.sample::<f64, _>(StandardNormal) * sigma,
    );
    RigidMotion::from_rotation(&UnitQuaternion::from_axis_angle(&axis, angle), t, center)
}

/// Perturbs every tooth of `target` by `perturb`, returning the record whose
/// ground truth undoes the perturbation.
fn perturbed_record(
    target: &Dentition,
    mut perturb: impl FnMut(&Tooth) -> RigidMotion,
) -> Result<CaseRecord> {
    let mut teeth = Vec::with_capacity(target.len());
    let mut gt = BTreeMap::new();
    for tooth in target.teeth() {
        let m = perturb(tooth);
        let moved = tooth.moved(&m)?;
        gt.insert(tooth.label(), m.inverse().recentered(moved.barycenter()));
        teeth.push(moved);
    }
    let pairs = (
        target.neighbor_pairs().iter().copied().collect::<Vec<_>>(),
        target.occlusal_pairs().iter().copied().collect::<Vec<_>>(),
    );
    Ok(CaseRecord {
        initial: Dentition::with_pairs(teeth, pairs.0, pairs.1)?,
        target: target.clone(),
        gt_motions: gt,
        arch_width: arch_width_of(target)?,
    })
}

/// Random per-tooth malocclusion of a neat dentition, scaled by `severity`.
pub fn malocclude(neat: &Dentition, severity: f64, params: MalocclusionParams, seed: u64) -> Result<CaseRecord> {
    if !(severity.is_finite() && severity >= 0.0) {
        return Err(Error::Range {
            name: "severity",
            value: severity,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturbed_record(neat, |tooth| {
        if severity == 0.0 {
            let _ = random_perturbation(tooth.barycenter(), 0.0, 0.0, &mut rng);
            return RigidMotion {
                c: tooth.barycenter(),
                ..RigidMotion::identity()
            };
        }
        random_perturbation(
            tooth.barycenter(),
            params.max_angle_deg * severity,
            params.translation_sigma * severity,
            &mut rng,
        )
    })
}

/// The motion covering fraction `s` of `gt`: slerp of the rotation from
/// identity, linear in the translation, same center.
pub fn partial_motion(gt: &RigidMotion, s: f64) -> RigidMotion {
    if s == 0.0 {
        return RigidMotion {
            c: gt.c,
            ..RigidMotion::identity()
        };
    }
    if s == 1.0 {
        return *gt;
    }
    let q = UnitQuaternion::identity().slerp(&gt.rotation(), s);
    RigidMotion::from_rotation(&q, gt.t * s, gt.c)
}

/// Intermediate stage between the initial (`s = 0`) and target (`s = 1`) poses.
pub fn interpolate_stage(record: &CaseRecord, s: f64) -> Result<Dentition> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Range {
            name: "stage fraction",
            value: s,
            lo: 0.0,
            hi: 1.0,
        });
    }
    if s == 0.0 {
        return Ok(record.initial.clone());
    }
    let motions = record.gt_motions.iter().map(|(&l, m)| (l, partial_motion(m, s))).collect();
    record.initial.moved(&motions)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentPolicy {
    /// Fresh random perturbation of the target.
    Naive { max_angle_deg: f64, translation_sigma: f64 },
    /// A random stage `s ∈ [s_min, s_max]` of the record's own trajectory plus
    /// a small perturbation.
    Staging {
        s_min: f64,
        s_max: f64,
        noise_angle_deg: f64,
        noise_sigma: f64,
    },
}

impl AugmentPolicy {
    pub fn naive() -> Self {
        AugmentPolicy::Naive {
            max_angle_deg: 30.0,
            translation_sigma: 1.0,
        }
    }

    pub fn staging() -> Self {
        AugmentPolicy::Staging {
            s_min: 0.0,
            s_max: 1.0,
            noise_angle_deg: 3.0,
            noise_sigma: 0.2,
        }
    }
}

pub fn augment(record: &CaseRecord, policy: AugmentPolicy, seed: u64) -> Result<CaseRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match policy {
        AugmentPolicy::Naive {
            max_angle_deg,
            translation_sigma,
        } => perturbed_record(&record.target, |tooth| {
            random_perturbation(tooth.barycenter(), max_angle_deg, translation_sigma, &mut rng)
        }),
        AugmentPolicy::Staging {
            s_min,
            s_max,
            noise_angle_deg,
            noise_sigma,
        } => {
            if !(0.0..=1.0).contains(&s_min) || !(s_min..=1.0).contains(&s_max) {
                return Err(Error::Range {
                    name: "stage fraction",
                    value: s_max,
                    lo: s_min,
                    hi: 1.0,
                });
            }
            let s = if s_max > s_min { rng.random_range(s_min..=s_max) } else { s_min };
            let mut teeth = Vec::with_capacity(record.initial.len());
            let mut gt = BTreeMap::new();
            for tooth in record.initial.teeth() {
                let label = tooth.label();
                let full = record.gt_motions[&label];
                let stage = partial_motion(&full, s);
                let staged_center = stage.apply_point(&tooth.barycenter());
                let noise = if noise_angle_deg > 0.0 || noise_sigma > 0.0 {
                    random_perturbation(staged_center, noise_angle_deg, noise_sigma, &mut rng)
                } else {
                    RigidMotion {
                        c: staged_center,
                        ..RigidMotion::identity()
                    }
                };
                // initial → new initial
                let forward = stage.then(&noise);
                let moved = if s == 1.0 && noise.is_identity() {
                    record.target.get(label).expect("target has every label").clone()
                } else {
                    tooth.moved(&forward)?
                };
                let to_target = forward.inverse().then(&full).recentered(moved.barycenter());
                gt.insert(label, to_target);
                teeth.push(moved);
            }
            Ok(CaseRecord {
                initial: Dentition::with_pairs(
                    teeth,
                    record.initial.neighbor_pairs().iter().copied(),
                    record.initial.occlusal_pairs().iter().copied(),
                )?,
                target: record.target.clone(),
                gt_motions: gt,
                arch_width: record.arch_width,
            })
        }
    }
}

/// Parameters of a generated dataset. Each case draws its own arch
/// dimensions around `base`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub cases: usize,
    pub seed: u64,
    pub base: ArchSpec,
    /// Shared half-width offset drawn uniformly from `±width_jitter`.
    pub width_jitter: f64,
    /// Independent per-side half-width offset, uniform in `±asymmetry_jitter`.
    pub asymmetry_jitter: f64,
    pub depth_jitter: f64,
    pub severity: f64,
    pub malocclusion: MalocclusionParams,
    /// Relative sizes of the train/val/test splits.
    pub split: [usize; 3],
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            cases: 284,
            seed: 0,
            base: ArchSpec::default(),
            width_jitter: 2.0,
            asymmetry_jitter: 1.0,
            depth_jitter: 2.0,
            severity: 1.0,
            malocclusion: MalocclusionParams::calibrated(),
            split: [200, 28, 56],
        }
    }
}

fn case_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// The arch spec of case `index`.
pub fn case_arch_spec(spec: &DatasetSpec, index: usize) -> ArchSpec {
    let mut rng = case_rng(spec.seed, index, 1);
    let mut jitter = |a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
    let shared = jitter(spec.width_jitter);
    let left = jitter(spec.asymmetry_jitter);
    let right = jitter(spec.asymmetry_jitter);
    let depth = jitter(spec.depth_jitter);
    ArchSpec {
        half_width_left: spec.base.half_width_left + shared + left,
        half_width_right: spec.base.half_width_right + shared + right,
        depth: spec.base.depth + depth,
        seed: spec.seed.wrapping_mul(1_000_003).wrapping_add(index as u64),
        ..spec.base.clone()
    }
}

pub fn generate_case(spec: &DatasetSpec, index: usize) -> Result<CaseRecord> {
    let neat = generate_neat(&case_arch_spec(spec, index))?;
    let seed = case_rng(spec.seed, index, 2).random::<u64>();
    malocclude(&neat, spec.severity, spec.malocclusion, seed)
}

/// Case names per split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn case_name(index: usize) -> String {
    format!("case_{index:04}")
}

/// Deterministic split of `0..cases` in the proportions of `spec.split`.
pub fn split_indices(spec: &DatasetSpec) -> [Vec<usize>; 3] {
    let mut order: Vec<usize> = (0..spec.cases).collect();
    let mut rng = case_rng(spec.seed, usize::MAX, 3);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let total: usize = spec.split.iter().sum::<usize>().max(1);
    let n_train = (spec.cases * spec.split[0] + total / 2) / total;
    let n_val = ((spec.cases * spec.split[1] + total / 2) / total).min(spec.cases - n_train);
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort();
    val.sort();
    test.sort();
    [train, val, test]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub cases: usize,
    pub cloud_format: String,
    pub splits: Splits,
}

/// Generates every case (in parallel; each case owns its RNG streams).
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<CaseRecord>> {
    (0..spec.cases).into_par_iter().map(|i| generate_case(spec, i)).collect()
}

/// Writes `records` under `dir`: one directory per case with a manifest plus
/// `initial/` and `target/` clouds, and a top-level `dataset.json`.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec, records: &[CaseRecord]) -> Result<DatasetDescriptor> {
    let format = io::CloudFormat::Ply;
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(dir)?;
    records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let case_dir = dir.join(case_name(i));
            mkdir(&case_dir.join("initial"))?;
            mkdir(&case_dir.join("target"))?;
            let mut manifest = CaseManifest::default();
            for tooth in rec.initial.teeth() {
                let label = tooth.label();
                let rel_initial = PathBuf::from("initial").join(format!("{label}.{}", format.extension()));
                let rel_target = PathBuf::from("target").join(format!("{label}.{}", format.extension()));
                io::write_cloud(&case_dir.join(&rel_initial), tooth.cloud())?;
                let target = rec.target.get(label).ok_or(Error::MissingAnchor(label))?;
                io::write_cloud(&case_dir.join(&rel_target), target.cloud())?;
                manifest.teeth.insert(
                    label,
                    ManifestEntry {
                        cloud: rel_initial,
                        target: Some(rel_target),
                        motion: Some(rec.gt_motions[&label]),
                    },
                );
            }
            io::write_json(&case_dir.join("manifest.json"), &manifest)
        })
        .collect::<Result<Vec<()>>>()?;
    let [train, val, test] = split_indices(spec);
    let names = |v: Vec<usize>| v.into_iter().map(case_name).collect();
    let descriptor = DatasetDescriptor {
        spec: spec.clone(),
        seed: spec.seed,
        cases: records.len(),
        cloud_format: format.extension().to_string(),
        splits: Splits {
            train: names(train),
            val: names(val),
            test: names(test),
        },
    };
    io::write_json(&dir.join("dataset.json"), &descriptor)?;
    Ok(descriptor)
}

pub fn read_descriptor(dir: &Path) -> Result<DatasetDescriptor> {
    io::read_json(&dir.join("dataset.json"))
}

/// Reads one case back as a record (its manifest must carry targets and motions).
pub fn read_case(dir: &Path, name: &str) -> Result<CaseRecord> {
    let path = dir.join(name).join("manifest.json");
    let loaded = io::load_case(&path)?;
    let target = loaded
        .target
        .ok_or_else(|| Error::parse(&path, "manifest has no target clouds"))?;
    let gt_motions = loaded
        .motions
        .ok_or_else(|| Error::parse(&path, "manifest has no ground-truth motions"))?;
    Ok(CaseRecord {
        arch_width: arch_width_of(&target)?,
        initial: loaded.initial,
        target,
        gt_motions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::{collide, GridConfig};

    fn small_spec() -> ArchSpec {
        ArchSpec {
            points_per_tooth: 128,
            ..ArchSpec::default()
        }
    }

    #[test]
    fn neat_dentition_is_complete_and_mirror_symmetric() {
        let d = generate_neat(&small_spec()).unwrap();
        assert_eq!(d.len(), 28);
        let x = arch_width_of(&d).unwrap();
        for k in 0..3 {
            assert!((x.up[k] + x.up[k + 3]).abs() < 1e-6, "{x:?}");
            assert!((x.low[k] + x.low[k + 3]).abs() < 1e-6, "{x:?}");
        }
        assert!(x.up[0] < 0.0 && x.up[3] > 0.0);
    }

    #[test]
    fn neat_generation_is_deterministic() {
        assert_eq!(generate_neat(&small_spec()).unwrap(), generate_neat(&small_spec()).unwrap());
    }

    #[test]
    fn infeasible_arch_rejected() {
        let spec = ArchSpec {
            half_width_left: 5.0,
            ..small_spec()
        };
        assert!(matches!(generate_neat(&spec), Err(Error::InfeasibleSpec(_))));
        let spec = ArchSpec {
            depth: -1.0,
            ..small_spec()
        };
        assert!(matches!(generate_neat(&spec), Err(Error::InfeasibleSpec(_))));
    }

    #[test]
    fn neat_pairs_pass_attachment_certificate() {
        let d = generate_neat(&ArchSpec::default()).unwrap();
        let grid = GridConfig::default();
        for (u, v) in d.all_pairs() {
            let r = collide(d.get(u).unwrap().cloud(), d.get(v).unwrap().cloud(), grid).unwrap();
            assert!(r.c_uv.abs() <= 2.0 * grid.interval, "{u}-{v}: c = {}", r.c_uv);
        }
    }

    #[test]
    fn footprints_touch_without_overlap() {
        let spec = ArchSpec::default();
        let curve = ArchCurve {
            sign: 1.0,
            half_width: spec.half_width_right,
            depth: spec.depth,
            exponent: spec.exponent,
        };
        let fps = place_side(&curve, &spec.teeth).unwrap();
        for w in fps.windows(2) {
            assert!(!w[0].overlaps(&w[1]));
            // a 1e-6 mm nudge toward the neighbor creates overlap
            let mut nudged = w[1];
            nudged.center += (w[0].center - w[1].center).normalize() * 1e-6;
            assert!(nudged.overlaps(&w[0]));
        }
    }

    #[test]
    fn arch_width_invariances() {
        let d = generate_neat(&small_spec()).unwrap();
        let x = arch_width_of(&d).unwrap();
        let shifted = d.moved_rigidly(&RigidMotion::translation(Vec3::new(0.0, 7.5, -2.0))).unwrap();
        assert_eq!(arch_width_of(&shifted).unwrap(), x);
        let scaled: Vec<Tooth> = d
            .teeth()
            .map(|t| {
                let pts = t.cloud().points().iter().map(|p| Vec3::new(p.x * 1.1, p.y, p.z)).collect();
                Tooth::new(t.label(), PointCloud::new(pts).unwrap()).unwrap()
            })
            .collect();
        let xs = arch_width_of(&Dentition::new(scaled).unwrap()).unwrap();
        for (a, b) in xs.to_array().iter().zip(x.to_array()) {
            assert!((a - 1.1 * b).abs() < 1e-9);
        }
        let missing = Dentition::new(d.teeth().filter(|t| t.label().fdi() != 16).cloned()).unwrap();
        assert!(matches!(arch_width_of(&missing), Err(Error::MissingAnchor(_))));
    }

    #[test]
    fn arch_width_offsets() {
        let x = ArchWidthVector {
            up: [-10.0, -12.0, -14.0, 10.0, 12.0, 14.0],
            low: [10.0, 12.0, 14.0, -10.0, -12.0, -14.0],
        };
        assert!((x.left_width() - 12.0).abs() < 1e-12 && (x.right_width() - 12.0).abs() < 1e-12);
        let y = x.with_offset(2.0, -1.0);
        assert!((y.left_width() - 14.0).abs() < 1e-12);
        assert!((y.right_width() - 11.0).abs() < 1e-12);
        assert_eq!(x.with_offset(0.0, 0.0), x);
    }

    #[test]
    fn severity_zero_is_identity() {
        let neat = generate_neat(&small_spec()).unwrap();
        let rec = malocclude(&neat, 0.0, MalocclusionParams::default(), 3).unwrap();
        assert_eq!(rec.initial, rec.target);
        assert!(rec.gt_motions.values().all(|m| m.is_identity()));
    }

    #[test]
    fn malocclusion_round_trips() {
        let neat = generate_neat(&small_spec()).unwrap();
        let rec = malocclude(&neat, 1.0, MalocclusionParams::default(), 11).unwrap();
        assert!(rec.round_trip_error().unwrap() < 1e-6);
        assert_ne!(rec.initial, rec.target);
        for (l, m) in &rec.gt_motions {
            assert!((m.c - rec.initial.get(*l).unwrap().barycenter()).norm() < 1e-9);
            assert!(m.angle_deg() <= 30.0 + 1e-9);
        }
    }

    #[test]
    fn stage_endpoints_and_midpoint() {
        let neat = generate_neat(&small_spec()).unwrap();
        let rec = malocclude(&neat, 1.0, MalocclusionParams::default(), 5).unwrap();
        assert_eq!(interpolate_stage(&rec, 0.0).unwrap(), rec.initial);
        let end = interpolate_stage(&rec, 1.0).unwrap();
        for (a, b) in end.teeth().zip(rec.target.teeth()) {
            for (p, q) in a.cloud().points().iter().zip(b.cloud().points()) {
                assert!((p - q).norm() < 1e-6);
            }
        }
        for m in rec.gt_motions.values() {
            // log-map oracle: angle = 2·atan2(|v|, w)
            let half = partial_motion(m, 0.5);
            let angle = |q: [f64; 4]| 2.0 * (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt().atan2(q[0]);
            assert!((angle(half.q) - angle(m.q) / 2.0).abs() < 1e-9);
        }
        assert!(matches!(interpolate_stage(&rec, 1.5), Err(Error::Range { .. })));
        assert!(matches!(interpolate_stage(&rec, -0.1), Err(Error::Range { .. })));
    }

    #[test]
    fn staging_without_noise_at_end_reaches_target() {
        let neat = generate_neat(&small_spec()).unwrap();
        let rec = malocclude(&neat, 1.0, MalocclusionParams::default(), 5).unwrap();
        let policy = AugmentPolicy::Staging {
            s_min: 1.0,
            s_max: 1.0,
            noise_angle_deg: 0.0,
            noise_sigma: 0.0,
        };
        let aug = augment(&rec, policy, 9).unwrap();
        assert_eq!(aug.initial, aug.target);
        assert!(aug.round_trip_error().unwrap() < 1e-6);
    }

    #[test]
    fn augmented_records_round_trip() {
        let neat = generate_neat(&small_spec()).unwrap();
        let rec = malocclude(&neat, 1.0, MalocclusionParams::default(), 2).unwrap();
        for (k, policy) in [AugmentPolicy::naive(), AugmentPolicy::staging()].into_iter().enumerate() {
            let aug = augment(&rec, policy, 100 + k as u64).unwrap();
            assert!(aug.round_trip_error().unwrap() < 1e-6, "{policy:?}");
            assert_eq!(aug.target, rec.target);
        }
    }

    #[test]
    fn naive_rotation_bounded_by_thirty_degrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let m = random_perturbation(Vec3::zeros(), 30.0, 1.0, &mut rng);
            worst = worst.max(m.angle_deg());
        }
        assert!(worst <= 30.0 + 1e-9, "{worst}");
        assert!(worst > 29.0);
    }

    #[test]
    fn splits_partition_cases() {
        let spec = DatasetSpec {
            cases: 284,
            ..DatasetSpec::default()
        };
        let [a, b, c] = split_indices(&spec);
        assert_eq!((a.len(), b.len(), c.len()), (200, 28, 56));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, (0..284).collect::<Vec<_>>());
    }

    #[test]
    fn dataset_round_trip_on_disk() {
        let spec = DatasetSpec {
            cases: 2,
            base: small_spec(),
            ..DatasetSpec::default()
        };
        let records = generate_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let desc = write_dataset(dir.path(), &spec, &records).unwrap();
        assert_eq!(read_descriptor(dir.path()).unwrap(), desc);
        let back = read_case(dir.path(), "case_0001").unwrap();
        assert_eq!(back.initial, records[1].initial);
        assert_eq!(back.target, records[1].target);
        assert_eq!(back.gt_motions, records[1].gt_motions);
    }
}
