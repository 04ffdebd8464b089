//! Approximate signed gap/penetration between two point clouds.
//!
//! A grid is laid on the mid-plane between the two barycenters. Every point is
//! projected onto the plane and assigned to the grid points within `R/√2`; each
//! cell keeps the deepest point of `u` (max signed distance along the normal)
//! and the shallowest point of `v` (min signed distance). The collision value
//! is the smallest `β_v − β_u` over cells covered by both clouds: negative for
//! interpenetration depth, positive for gap length.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{barycenter, Dentition, PointCloud, RigidMotion, ToothLabel, Vec3};
use crate::{Error, Result};

const MIN_BARYCENTER_DISTANCE: f64 = 1e-6;

/// Grid interval `R` (mm) and resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub interval: f64,
    pub rows: usize,
    pub cols: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            interval: 0.3,
            rows: 50,
            cols: 50,
        }
    }
}

impl GridConfig {
    /// Side lengths of the grid in mm: `(rows − 1)·R` by `(cols − 1)·R`.
    pub fn extent(&self) -> (f64, f64) {
        (
            (self.rows.saturating_sub(1)) as f64 * self.interval,
            (self.cols.saturating_sub(1)) as f64 * self.interval,
        )
    }

    pub fn query_radius(&self) -> f64 {
        self.interval / std::f64::consts::SQRT_2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPlane {
    pub origin: Vec3,
    /// Unit normal pointing from `u`'s barycenter toward `v`'s.
    pub normal: Vec3,
    pub e1: Vec3,
    pub e2: Vec3,
    pub grid: GridConfig,
}

impl GridPlane {
    fn row_offset(&self, i: usize) -> f64 {
        (i as f64 - (self.grid.rows as f64 - 1.0) / 2.0) * self.grid.interval
    }

    fn col_offset(&self, j: usize) -> f64 {
        (j as f64 - (self.grid.cols as f64 - 1.0) / 2.0) * self.grid.interval
    }

    pub fn grid_point(&self, row: usize, col: usize) -> Vec3 {
        self.origin + self.e1 * self.row_offset(row) + self.e2 * self.col_offset(col)
    }

    /// Signed distance of `p` along the normal.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        (p - self.origin).dot(&self.normal)
    }
}

pub fn build_plane(cloud_u: &PointCloud, cloud_v: &PointCloud, grid: GridConfig) -> Result<GridPlane> {
    let bu = barycenter(cloud_u)?;
    let bv = barycenter(cloud_v)?;
    let axis = bv - bu;
    let dist = axis.norm();
    if !(dist > MIN_BARYCENTER_DISTANCE) {
        return Err(Error::DegeneratePair(dist));
    }
    let normal = axis / dist;
    // Coordinate axis least aligned with the normal; ties go to the lowest index.
    let mut k = 0;
    for i in 1..3 {
        if normal[i].abs() < normal[k].abs() {
            k = i;
        }
    }
    let mut a = Vec3::zeros();
    a[k] = 1.0;
    let e1 = a.cross(&normal).normalize();
    let e2 = normal.cross(&e1);
    Ok(GridPlane {
        origin: (bu + bv) * 0.5,
        normal,
        e1,
        e2,
        grid,
    })
}

/// Per-cell extremal depths, row-major. `None` marks an empty cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMaps {
    pub rows: usize,
    pub cols: usize,
    pub beta_u: Vec<Option<f64>>,
    pub beta_v: Vec<Option<f64>>,
    pub argmax_u: Vec<Option<usize>>,
    pub argmin_v: Vec<Option<usize>>,
}

#[derive(Clone, Copy, PartialEq)]
enum Extremum {
    Max,
    Min,
}

fn splat(
    plane: &GridPlane,
    cloud: &PointCloud,
    keep: Extremum,
    depth: &mut [Option<f64>],
    arg: &mut [Option<usize>],
) {
    let g = &plane.grid;
    let r = g.query_radius();
    // Inclusive boundary, with slack for rounding in the squared distances.
    let r2 = r * r + 1e-12;
    let half_rows = (g.rows as f64 - 1.0) / 2.0;
    let half_cols = (g.cols as f64 - 1.0) / 2.0;
    for (idx, p) in cloud.points().iter().enumerate() {
        let rel = p - plane.origin;
        let d = rel.dot(&plane.normal);
        let a = rel.dot(&plane.e1);
        let b = rel.dot(&plane.e2);
        let fi = a / g.interval + half_rows;
        let fj = b / g.interval + half_cols;
        let span = r / g.interval + 1e-9;
        let i_lo = (fi - span).ceil().max(0.0);
        let i_hi = (fi + span).floor().min(g.rows as f64 - 1.0);
        let j_lo = (fj - span).ceil().max(0.0);
        let j_hi = (fj + span).floor().min(g.cols as f64 - 1.0);
        if i_lo > i_hi || j_lo > j_hi {
            continue;
        }
        for i in i_lo as usize..=i_hi as usize {
            let da = a - plane.row_offset(i);
            for j in j_lo as usize..=j_hi as usize {
                let db = b - plane.col_offset(j);
                if da * da + db * db > r2 {
                    continue;
                }
                let cell = i * g.cols + j;
                let better = match depth[cell] {
                    None => true,
                    Some(cur) => match keep {
                        Extremum::Max => d > cur,
                        Extremum::Min => d < cur,
                    },
                };
                if better {
                    depth[cell] = Some(d);
                    arg[cell] = Some(idx);
                }
            }
        }
    }
}

pub fn depth_maps(plane: &GridPlane, cloud_u: &PointCloud, cloud_v: &PointCloud) -> DepthMaps {
    let cells = plane.grid.rows * plane.grid.cols;
    let mut maps = DepthMaps {
        rows: plane.grid.rows,
        cols: plane.grid.cols,
        beta_u: vec![None; cells],
        beta_v: vec![None; cells],
        argmax_u: vec![None; cells],
        argmin_v: vec![None; cells],
    };
    splat(plane, cloud_u, Extremum::Max, &mut maps.beta_u, &mut maps.argmax_u);
    splat(plane, cloud_v, Extremum::Min, &mut maps.beta_v, &mut maps.argmin_v);
    maps
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub plane: GridPlane,
    pub maps: DepthMaps,
    /// Signed separation in mm: negative = overlap depth, positive = gap.
    pub c_uv: f64,
    /// `(row, col)` of the cell attaining the minimum.
    pub active_cell: (usize, usize),
    /// `(index in u, index in v)` of the two points defining `c_uv`.
    pub active_points: (usize, usize),
    pub len_u: usize,
    pub len_v: usize,
}

/// Minimum of `β_v − β_u` over cells covered by both clouds. Ties go to the
/// lowest row-major cell.
pub fn collision_value(plane: GridPlane, maps: DepthMaps, len_u: usize, len_v: usize) -> Result<CollisionReport> {
    let mut best: Option<(f64, usize)> = None;
    for cell in 0..maps.beta_u.len() {
        if let (Some(bu), Some(bv)) = (maps.beta_u[cell], maps.beta_v[cell]) {
            let diff = bv - bu;
            if best.is_none_or(|(b, _)| diff < b) {
                best = Some((diff, cell));
            }
        }
    }
    let (c_uv, cell) = best.ok_or(Error::NoOverlapSupport)?;
    let active_points = (
        maps.argmax_u[cell].expect("covered cell has an argmax"),
        maps.argmin_v[cell].expect("covered cell has an argmin"),
    );
    Ok(CollisionReport {
        active_cell: (cell / maps.cols, cell % maps.cols),
        active_points,
        c_uv,
        plane,
        maps,
        len_u,
        len_v,
    })
}

/// Plane, depth maps and collision value in one call.
pub fn collide(cloud_u: &PointCloud, cloud_v: &PointCloud, grid: GridConfig) -> Result<CollisionReport> {
    let plane = build_plane(cloud_u, cloud_v, grid)?;
    let maps = depth_maps(&plane, cloud_u, cloud_v);
    collision_value(plane, maps, cloud_u.len(), cloud_v.len())
}

pub fn collision_loss(report: &CollisionReport) -> f64 {
    report.c_uv * report.c_uv
}

/// Subgradient of `c²` with respect to every point of `u` and `v`.
///
/// The plane and cell membership are held fixed, so only the two active points
/// receive gradient: `−2c·n` on `u`'s and `+2c·n` on `v`'s.
pub fn collision_backward(report: &CollisionReport) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut gu = vec![Vec3::zeros(); report.len_u];
    let mut gv = vec![Vec3::zeros(); report.len_v];
    let g = report.plane.normal * (2.0 * report.c_uv);
    let (iu, iv) = report.active_points;
    gu[iu] = -g;
    gv[iv] = g;
    (gu, gv)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairValue {
    pub u: ToothLabel,
    pub v: ToothLabel,
    pub c_uv: f64,
    pub normal: Vec3,
    pub active_points: (usize, usize),
}

/// Aggregated collision term over a dentition's neighbor and occlusal pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DentitionCollision {
    /// `Σ c² / normalizer`.
    pub loss: f64,
    /// Number of pairs in the graph (evaluated or not).
    pub normalizer: usize,
    pub pairs: Vec<PairValue>,
    /// Pairs without jointly covered cells; they contribute zero.
    pub unsupported: Vec<(ToothLabel, ToothLabel)>,
}

impl DentitionCollision {
    /// Gradient of `loss` with respect to individual points: `(label, point index, ∂loss/∂p)`.
    pub fn point_gradients(&self) -> Vec<(ToothLabel, usize, Vec3)> {
        let scale = 1.0 / self.normalizer.max(1) as f64;
        let mut out = Vec::with_capacity(self.pairs.len() * 2);
        for p in &self.pairs {
            let g = p.normal * (2.0 * p.c_uv * scale);
            out.push((p.u, p.active_points.0, -g));
            out.push((p.v, p.active_points.1, g));
        }
        out
    }

    /// Gradient of `loss` with respect to each tooth's translation.
    pub fn translation_gradients(&self) -> BTreeMap<ToothLabel, Vec3> {
        let mut out = BTreeMap::new();
        for (label, _, g) in self.point_gradients() {
            *out.entry(label).or_insert_with(Vec3::zeros) += g;
        }
        out
    }
}

/// Collision values for the given pairs of already-placed clouds.
///
/// Pairs are evaluated in parallel and reduced in pair order, so the sum is
/// deterministic.
pub fn pairs_collision(
    clouds: &BTreeMap<ToothLabel, PointCloud>,
    pairs: &[(ToothLabel, ToothLabel)],
    grid: GridConfig,
) -> Result<DentitionCollision> {
    let results: Vec<Result<Option<PairValue>>> = pairs
        .par_iter()
        .map(|&(u, v)| {
            let missing = |l: ToothLabel| Error::Shape(format!("pair references missing tooth {l}"));
            let cu = clouds.get(&u).ok_or_else(|| missing(u))?;
            let cv = clouds.get(&v).ok_or_else(|| missing(v))?;
            match collide(cu, cv, grid) {
                Ok(r) => Ok(Some(PairValue {
                    u,
                    v,
                    c_uv: r.c_uv,
                    normal: r.plane.normal,
                    active_points: r.active_points,
                })),
                Err(Error::NoOverlapSupport) | Err(Error::DegeneratePair(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut out = DentitionCollision {
        loss: 0.0,
        normalizer: pairs.len(),
        pairs: Vec::with_capacity(pairs.len()),
        unsupported: Vec::new(),
    };
    let mut sum = 0.0;
    for (&pair, res) in pairs.iter().zip(results) {
        match res? {
            Some(p) => {
                sum += p.c_uv * p.c_uv;
                out.pairs.push(p);
            }
            None => out.unsupported.push(pair),
        }
    }
    out.loss = if pairs.is_empty() { 0.0 } else { sum / pairs.len() as f64 };
    Ok(out)
}

/// `L_c` of a dentition after applying `motions` (teeth without an entry stay put).
pub fn dentition_collision_loss(
    dentition: &Dentition,
    motions: &BTreeMap<ToothLabel, RigidMotion>,
    grid: GridConfig,
) -> Result<DentitionCollision> {
    let moved = dentition.moved(motions)?;
    let clouds: BTreeMap<ToothLabel, PointCloud> = moved.teeth().map(|t| (t.label(), t.cloud().clone())).collect();
    let pairs: Vec<_> = dentition.all_pairs().collect();
    pairs_collision(&clouds, &pairs, grid)
}
