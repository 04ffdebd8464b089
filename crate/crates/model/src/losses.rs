//! Training losses: reconstruction, quaternion parameter, feature consistency
//! and collision, in plain form (for evaluation and oracles) and as tape
//! graphs (for training).

use std::collections::BTreeMap;

use arrange_core::collision::{pairs_collision, GridConfig};
use arrange_core::geometry::{quat_normalize, Category, Dentition, PointCloud, RigidMotion, Tooth, ToothLabel};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{FixedGradient, Tape, Var};
use crate::error::{ModelError, Result};
use crate::network::{CaseInput, Graph, Network};
use crate::params::Bound;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_p: f64,
    pub lambda_f: f64,
    pub lambda_c: f64,
    /// Use squared point distances in the reconstruction term.
    pub squared_reconstruction: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_r: 0.5,
            lambda_p: 20.0,
            lambda_f: 1.0,
            lambda_c: 2.0,
            squared_reconstruction: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_r, self.lambda_p, self.lambda_f, self.lambda_c];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(ModelError::Config(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        Ok(())
    }
}

/// The four loss values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_r: f64,
    pub l_p: f64,
    pub l_f: f64,
    pub l_c: f64,
}

impl LossComponents {
    pub fn scaled(&self, s: f64) -> LossComponents {
        LossComponents {
            l_r: self.l_r * s,
            l_p: self.l_p * s,
            l_f: self.l_f * s,
            l_c: self.l_c * s,
        }
    }

    pub fn add(&mut self, o: &LossComponents) {
        self.l_r += o.l_r;
        self.l_p += o.l_p;
        self.l_f += o.l_f;
        self.l_c += o.l_c;
    }
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    let named = [("L_r", c.l_r), ("L_p", c.l_p), ("L_f", c.l_f), ("L_c", c.l_c)];
    if let Some((name, v)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(ModelError::NonFiniteLoss {
            step: None,
            detail: format!("{name} = {v}"),
        });
    }
    Ok(w.lambda_r * c.l_r + w.lambda_p * c.l_p + w.lambda_f * c.l_f + w.lambda_c * c.l_c)
}

fn same_labels<A, B>(a: &BTreeMap<ToothLabel, A>, b: &BTreeMap<ToothLabel, B>) -> Result<()> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(ModelError::Shape("label sets differ".into()));
    }
    Ok(())
}

/// Mean over teeth of the mean point distance (squared if `squared`).
pub fn reconstruct_loss(predicted: &Dentition, target: &Dentition, squared: bool) -> Result<f64> {
    same_labels(predicted.teeth_map(), target.teeth_map())?;
    if predicted.is_empty() {
        return Err(arrange_core::Error::EmptyInput("dentition").into());
    }
    let mut sum = 0.0;
    for (p, t) in predicted.teeth().zip(target.teeth()) {
        let (pp, tp) = (p.cloud().points(), t.cloud().points());
        if pp.len() != tp.len() || pp.is_empty() {
            return Err(ModelError::Shape(format!(
                "tooth {}: {} vs {} points",
                p.label(),
                pp.len(),
                tp.len()
            )));
        }
        let d: f64 = pp
            .iter()
            .zip(tp)
            .map(|(a, b)| if squared { (a - b).norm_squared() } else { (a - b).norm() })
            .sum();
        sum += d / pp.len() as f64;
    }
    Ok(sum / predicted.len() as f64)
}

/// Mean over teeth of `‖q̄ − q*‖` after sign canonicalization of both.
pub fn parameter_loss(
    predicted: &BTreeMap<ToothLabel, RigidMotion>,
    target: &BTreeMap<ToothLabel, RigidMotion>,
) -> Result<f64> {
    same_labels(predicted, target)?;
    if predicted.is_empty() {
        return Err(arrange_core::Error::EmptyInput("motions").into());
    }
    let mut sum = 0.0;
    for (p, t) in predicted.values().zip(target.values()) {
        let (a, b) = (quat_normalize(p.q)?, quat_normalize(t.q)?);
        sum += a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    }
    Ok(sum / predicted.len() as f64)
}

/// Features entering the consistency loss, per tooth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConsistencyBatch {
    pub f_geo: BTreeMap<ToothLabel, Vec<f64>>,
    pub f_proj: BTreeMap<ToothLabel, Vec<f64>>,
    /// Target-encoder geometric features of the ground-truth teeth.
    pub geo_positive: BTreeMap<ToothLabel, Vec<f64>>,
    /// Target-encoder geometric features of the rearranged ground truth.
    pub geo_negative: BTreeMap<ToothLabel, Vec<f64>>,
    pub pos_positive: BTreeMap<ToothLabel, Vec<f64>>,
    pub pos_negative: BTreeMap<ToothLabel, Vec<f64>>,
}

fn unit(label: ToothLabel, v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) {
        return Err(ModelError::DegenerateFeature(label));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn cosine(label: ToothLabel, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ModelError::Shape(format!("tooth {label}: feature sizes {} vs {}", a.len(), b.len())));
    }
    let (a, b) = (unit(label, a)?, unit(label, b)?);
    Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum())
}

/// `¼(2 − s(f_g, g⁺) + s(f_g, g⁻) + 2 − s(f̄_p, p⁺) + s(f̄_p, p⁻))`, averaged
/// over teeth, with `s` the cosine similarity.
pub fn consistency_loss(batch: &ConsistencyBatch) -> Result<f64> {
    for m in [&batch.f_proj, &batch.geo_positive, &batch.geo_negative, &batch.pos_positive, &batch.pos_negative] {
        same_labels(&batch.f_geo, m)?;
    }
    if batch.f_geo.is_empty() {
        return Err(arrange_core::Error::EmptyInput("features").into());
    }
    let mut sum = 0.0;
    for (&l, fg) in &batch.f_geo {
        let fp = &batch.f_proj[&l];
        sum += 0.25
            * (2.0 - cosine(l, fg, &batch.geo_positive[&l])? + cosine(l, fg, &batch.geo_negative[&l])? + 2.0
                - cosine(l, fp, &batch.pos_positive[&l])?
                + cosine(l, fp, &batch.pos_negative[&l])?);
    }
    Ok(sum / batch.f_geo.len() as f64)
}

/// Permutation `perm` over `categories` (one entry per tooth) such that
/// `categories[perm[i]] != categories[i]` for every `i`.
///
/// Teeth are ordered by category (shuffled within each), then each takes the
/// tooth `k` places further along, with `k` drawn from
/// `[largest category, n − largest category]`; that window guarantees the
/// two never share a category block.
pub fn category_derangement(categories: &[Category], seed: u64) -> Result<Vec<usize>> {
    let n = categories.len();
    let mut counts: BTreeMap<Category, Vec<usize>> = BTreeMap::new();
    for (i, c) in categories.iter().enumerate() {
        counts.entry(*c).or_default().push(i);
    }
    if counts.len() < 2 {
        return Err(ModelError::CannotRearrange(format!(
            "{} distinct categories among {n} teeth",
            counts.len()
        )));
    }
    let largest = counts.values().map(Vec::len).max().unwrap_or(0);
    if 2 * largest > n {
        return Err(ModelError::CannotRearrange(format!(
            "{largest} of {n} teeth share one category"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(n);
    for members in counts.values_mut() {
        members.shuffle(&mut rng);
        order.extend_from_slice(members);
    }
    let k = rng.random_range(largest..=n - largest);
    let mut perm = vec![0; n];
    for (i, &src) in order.iter().enumerate() {
        perm[src] = order[(i + k) % n];
    }
    Ok(perm)
}

/// Each label receives the cloud of a tooth from another category.
pub fn make_negative_pairs(dentition: &Dentition, seed: u64) -> Result<Dentition> {
    let teeth: Vec<&Tooth> = dentition.teeth().collect();
    let cats: Vec<Category> = teeth.iter().map(|t| t.label().category()).collect();
    let perm = category_derangement(&cats, seed)?;
    let swapped = teeth
        .iter()
        .zip(&perm)
        .map(|(t, &src)| Tooth::new(t.label(), teeth[src].cloud().clone()))
        .collect::<arrange_core::Result<Vec<_>>>()?;
    Ok(Dentition::new(swapped)?)
}

/// Everything the losses need beyond the network input.
#[derive(Clone, Debug)]
pub struct CaseTargets {
    /// Ground-truth positions of the input points (`T·N × 3`, same order).
    pub points: Array2<f64>,
    /// Barycenters of the ground-truth point blocks.
    pub centers: Array2<f64>,
    /// `T × 4` ground-truth quaternions, `w ≥ 0`.
    pub quats: Array2<f64>,
    /// Rearranged ground truth (`T·N × 3`) and its block barycenters.
    pub negatives: (Array2<f64>, Array2<f64>),
    pub dense: DenseClouds,
}

/// Denser clouds of the initial pose used by the collision term.
#[derive(Clone, Debug)]
pub struct DenseClouds {
    pub points: Array2<f64>,
    pub per_tooth: usize,
    /// Adjacent pairs as indices into the case's label order.
    pub pairs: Vec<(usize, usize)>,
}

/// Loss nodes of one case.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_r: Var,
    pub l_p: Var,
    pub l_f: Var,
    pub l_c: Var,
    pub total: Var,
}

impl LossVars {
    pub fn components(&self, tape: &Tape) -> LossComponents {
        LossComponents {
            l_r: tape.scalar(self.l_r),
            l_p: tape.scalar(self.l_p),
            l_f: tape.scalar(self.l_f),
            l_c: tape.scalar(self.l_c),
        }
    }
}

/// `(moved points, collision node)` on the tape.
pub fn collision_graph(
    tape: &mut Tape,
    graph: &Graph,
    input: &CaseInput,
    dense: &DenseClouds,
    grid: GridConfig,
) -> Result<Var> {
    let d = dense.per_tooth;
    let moved = tape.rigid_apply(graph.q, graph.t, &dense.points, &input.centers, d);
    let mv = tape.value(moved);
    let clouds: BTreeMap<ToothLabel, PointCloud> = input
        .labels
        .iter()
        .enumerate()
        .map(|(l, &label)| {
            let pts = (l * d..(l + 1) * d)
                .map(|r| arrange_core::geometry::Vec3::new(mv[[r, 0]], mv[[r, 1]], mv[[r, 2]]))
                .collect();
            Ok((label, PointCloud::new(pts)?))
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(ToothLabel, ToothLabel)> = dense
        .pairs
        .iter()
        .map(|&(u, v)| (input.labels[u], input.labels[v]))
        .collect();
    let col = pairs_collision(&clouds, &pairs, grid)?;
    let slot: BTreeMap<ToothLabel, usize> = input.labels.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    let mut grad = Array2::zeros(mv.dim());
    let mut branch = Vec::with_capacity(col.pairs.len() * 2 + col.unsupported.len());
    for (label, idx, g) in col.point_gradients() {
        let r = slot[&label] * d + idx;
        for k in 0..3 {
            grad[[r, k]] += g[k];
        }
        branch.push(r);
    }
    branch.push(usize::MAX - col.unsupported.len());
    Ok(tape.fixed_gradient(
        col.loss,
        FixedGradient {
            input: moved,
            grad,
            branch,
        },
    ))
}

fn check_rows_nonzero(tape: &Tape, v: Var, labels: &[ToothLabel]) -> Result<()> {
    for (l, r) in tape.value(v).rows().into_iter().enumerate() {
        if !(r.dot(&r) > 0.0) {
            return Err(ModelError::DegenerateFeature(labels[l]));
        }
    }
    Ok(())
}

/// Mean over teeth of `¼(4 − s₁ + s₂ − s₃ + s₄)` on tape; `target` holds the
/// (frozen) EMA encoder parameters.
pub fn consistency_graph(
    tape: &mut Tape,
    net: &Network,
    target: &Bound,
    graph: &Graph,
    input: &CaseInput,
    targets: &CaseTargets,
) -> Result<Var> {
    let (geo_pos, pos_pos) = net.encode_local(tape, target, &targets.points, &targets.centers);
    let (geo_neg, pos_neg) = net.encode_local(tape, target, &targets.negatives.0, &targets.negatives.1);
    for v in [graph.f_geo, graph.f_proj, geo_pos, pos_pos, geo_neg, pos_neg] {
        check_rows_nonzero(tape, v, &input.labels)?;
    }
    let [fg, fp, gp, pp, gn, pn] =
        [graph.f_geo, graph.f_proj, geo_pos, pos_pos, geo_neg, pos_neg].map(|v| tape.normalize_rows(v));
    let s1 = tape.row_dot(fg, gp);
    let s2 = tape.row_dot(fg, gn);
    let s3 = tape.row_dot(fp, pp);
    let s4 = tape.row_dot(fp, pn);
    let a = tape.sub(s2, s1);
    let b = tape.sub(s4, s3);
    let sum = tape.add(a, b);
    let m = tape.mean(sum);
    Ok(tape.affine(m, 0.25, 1.0))
}

/// All four losses and their weighted total for one case.
#[allow(clippy::too_many_arguments)]
pub fn case_loss_graph(
    tape: &mut Tape,
    net: &Network,
    target: &Bound,
    graph: &Graph,
    input: &CaseInput,
    targets: &CaseTargets,
    weights: &LossWeights,
    grid: GridConfig,
) -> Result<LossVars> {
    let moved = tape.rigid_apply(graph.q, graph.t, &input.points, &input.centers, input.per_tooth);
    let gt = tape.constant(targets.points.clone());
    let diff = tape.sub(moved, gt);
    let dist = if weights.squared_reconstruction {
        tape.row_dot(diff, diff)
    } else {
        tape.row_norm(diff)
    };
    let l_r = tape.mean(dist);

    let q_gt = tape.constant(targets.quats.clone());
    let dq = tape.sub(graph.q, q_gt);
    let qn = tape.row_norm(dq);
    let l_p = tape.mean(qn);

    let l_f = consistency_graph(tape, net, target, graph, input, targets)?;
    let l_c = collision_graph(tape, graph, input, &targets.dense, grid)?;

    let terms = [
        (l_r, weights.lambda_r),
        (l_p, weights.lambda_p),
        (l_f, weights.lambda_f),
        (l_c, weights.lambda_c),
    ];
    let mut total = tape.affine(terms[0].0, terms[0].1, 0.0);
    for &(v, w) in &terms[1..] {
        let s = tape.affine(v, w, 0.0);
        total = tape.add(total, s);
    }
    Ok(LossVars {
        l_r,
        l_p,
        l_f,
        l_c,
        total,
    })
}
