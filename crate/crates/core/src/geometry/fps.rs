use super::PointCloud;
use crate::{Error, Result};

/// Farthest-point sampling order.
///
/// The seed is the lexicographically smallest point (x, then y, then z); every
/// later pick maximizes the distance to the already chosen set. Ties go to the
/// lowest index.
pub fn fps_indices(cloud: &PointCloud, n: usize) -> Result<Vec<usize>> {
    let pts = cloud.points();
    if n > pts.len() {
        return Err(Error::InsufficientPoints {
            requested: n,
            available: pts.len(),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut seed = 0;
    for (i, p) in pts.iter().enumerate().skip(1) {
        let s = &pts[seed];
        if (p.x, p.y, p.z) < (s.x, s.y, s.z) {
            seed = i;
        }
    }
    let mut chosen = Vec::with_capacity(n);
    let mut taken = vec![false; pts.len()];
    let mut min_d2 = vec![f64::INFINITY; pts.len()];
    let mut current = seed;
    loop {
        chosen.push(current);
        taken[current] = true;
        if chosen.len() == n {
            break;
        }
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d2 = (p - c).norm_squared();
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(chosen)
}

pub fn fps_sample(cloud: &PointCloud, n: usize) -> Result<PointCloud> {
    Ok(cloud.select(&fps_indices(cloud, n)?))
}
