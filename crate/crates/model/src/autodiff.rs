//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse. Nodes built only from constants carry no gradient.
//! Piecewise operations (ReLU, max-pooling, quaternion sign canonicalization,
//! collision) record the branch they took so tests can detect when a
//! finite-difference step crosses a kink.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{s, Array2, ArrayView2, Axis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed gradient of a scalar node with respect to its single input.
#[derive(Clone, Debug)]
pub struct FixedGradient {
    pub input: Var,
    pub grad: Array2<f64>,
    /// Discrete state of the evaluation (e.g. active indices).
    pub branch: Vec<usize>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    SegmentMax { x: Var, argmax: Array2<usize> },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    MulRow(Var, Var),
    NormalizeRows(Var),
    RowDot(Var, Var),
    RowNorm(Var),
    Mean(Var),
    QuatNormalize { q: Var, flipped: Vec<bool> },
    RigidApply { q: Var, t: Var, local: Array2<f64>, segment: usize },
    Fixed(Box<FixedGradient>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

fn row(v: &Array2<f64>) -> ndarray::ArrayView1<'_, f64> {
    v.row(0)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input (a parameter or a probe in gradient checks).
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::MatMul(a, b), g)
    }

    /// `x + b` with the `1 × m` row `b` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let v = self.value(x) + &row(self.value(b));
        let g = self.any_grad(&[x, b]);
        self.push(v, Op::AddRow(x, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), g)
    }

    /// `scale·x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let v = self.value(x).mapv(|e| scale * e + offset);
        let g = self.any_grad(&[x]);
        self.push(v, Op::Affine(x, scale), g)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e.max(0.0));
        let g = self.any_grad(&[x]);
        self.push(v, Op::Relu(x), g)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).mapv(|e| if e > 0.0 { e } else { slope * e });
        let g = self.any_grad(&[x]);
        self.push(v, Op::LeakyRelu(x, slope), g)
    }

    /// Channel-wise max over consecutive row groups of size `segment`; the
    /// first maximal row wins ties.
    pub fn segment_max(&mut self, x: Var, segment: usize) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.dim();
        assert!(segment > 0 && n % segment == 0, "rows {n} not divisible by segment {segment}");
        let groups = n / segment;
        let mut out = Array2::from_elem((groups, m), f64::NEG_INFINITY);
        let mut arg = Array2::zeros((groups, m));
        for gi in 0..groups {
            for r in gi * segment..(gi + 1) * segment {
                for j in 0..m {
                    let e = xv[[r, j]];
                    if e > out[[gi, j]] {
                        out[[gi, j]] = e;
                        arg[[gi, j]] = r;
                    }
                }
            }
        }
        let g = self.any_grad(&[x]);
        self.push(out, Op::SegmentMax { x, argmax: arg }, g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let g = self.any_grad(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        let g = self.any_grad(&[x]);
        self.push(v, Op::SliceCols(x, start), g)
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let v = self.value(x).select(Axis(0), &index);
        let g = self.any_grad(&[x]);
        self.push(v, Op::GatherRows(x, index), g)
    }

    /// Repeats a `1 × m` row `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Var {
        self.gather_rows(x, vec![0; n])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).t().to_owned();
        let g = self.any_grad(&[x]);
        self.push(v, Op::Transpose(x), g)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for mut r in v.rows_mut() {
            let max = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            r.mapv_inplace(|e| (e - max).exp());
            let sum = r.sum();
            r /= sum;
        }
        let g = self.any_grad(&[x]);
        self.push(v, Op::SoftmaxRows(x), g)
    }

    /// Per-row standardization `(x − mean)/sqrt(var + eps)`, population variance.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut v = self.value(x).clone();
        let m = v.ncols() as f64;
        let mut inv_std = Vec::with_capacity(v.nrows());
        for mut r in v.rows_mut() {
            let mean = r.sum() / m;
            r -= mean;
            let var = r.dot(&r) / m;
            let is = 1.0 / (var + eps).sqrt();
            r *= is;
            inv_std.push(is);
        }
        let g = self.any_grad(&[x]);
        self.push(v, Op::LayerNormRows { x, inv_std }, g)
    }

    /// `x ⊙ g` with the `1 × m` row `g` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Var {
        let v = self.value(x) * &row(self.value(gain));
        let g = self.any_grad(&[x, gain]);
        self.push(v, Op::MulRow(x, gain), g)
    }

    /// Rows scaled to unit length. Callers must rule out zero rows.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for mut r in v.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        let g = self.any_grad(&[x]);
        self.push(v, Op::NormalizeRows(x), g)
    }

    /// `n × 1` column of row-wise inner products.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let v = (av * bv).sum_axis(Axis(1)).insert_axis(Axis(1));
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::RowDot(a, b), g)
    }

    /// `n × 1` column of row Euclidean norms.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        let g = self.any_grad(&[x]);
        self.push(v, Op::RowNorm(x), g)
    }

    /// `1 × 1` mean of every entry.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(x).mean().unwrap_or(0.0));
        let g = self.any_grad(&[x]);
        self.push(v, Op::Mean(x), g)
    }

    /// Unit quaternions `(w, x, y, z)` per row with `w ≥ 0`. Callers must rule
    /// out near-zero rows.
    pub fn quat_normalize(&mut self, q: Var) -> Var {
        let mut v = self.value(q).clone();
        assert_eq!(v.ncols(), 4);
        let mut flipped = Vec::with_capacity(v.nrows());
        for mut r in v.rows_mut() {
            let n = r.dot(&r).sqrt();
            let flip = r[0] < 0.0;
            r /= if flip { -n } else { n };
            flipped.push(flip);
        }
        let g = self.any_grad(&[q]);
        self.push(v, Op::QuatNormalize { q, flipped }, g)
    }

    /// Rigid motion of constant points: row block `l` (of `segment` rows) of
    /// `points` becomes `R(q_l)(p − c_l) + c_l + t_l`. `q` must hold unit rows.
    pub fn rigid_apply(&mut self, q: Var, t: Var, points: &Array2<f64>, centers: &Array2<f64>, segment: usize) -> Var {
        let (qv, tv) = (self.value(q), self.value(t));
        let teeth = qv.nrows();
        assert_eq!(points.nrows(), teeth * segment);
        let mut local = points.clone();
        let mut out = Array2::zeros(points.dim());
        for l in 0..teeth {
            let (w, u) = (qv[[l, 0]], [qv[[l, 1]], qv[[l, 2]], qv[[l, 3]]]);
            for r in l * segment..(l + 1) * segment {
                let v = [
                    points[[r, 0]] - centers[[l, 0]],
                    points[[r, 1]] - centers[[l, 1]],
                    points[[r, 2]] - centers[[l, 2]],
                ];
                let rv = rotate(w, u, v);
                for k in 0..3 {
                    local[[r, k]] = v[k];
                    out[[r, k]] = rv[k] + centers[[l, k]] + tv[[l, k]];
                }
            }
        }
        let g = self.any_grad(&[q, t]);
        self.push(out, Op::RigidApply { q, t, local, segment }, g)
    }

    /// Scalar node whose gradient with respect to `input` was computed with
    /// the value.
    pub fn fixed_gradient(&mut self, value: f64, fixed: FixedGradient) -> Var {
        let g = self.any_grad(&[fixed.input]);
        self.push(Array2::from_elem((1, 1), value), Op::Fixed(Box::new(fixed)), g)
    }

    /// Hash of every discrete branch taken so far.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    i.hash(&mut h);
                    for e in self.value(*x).iter() {
                        (*e > 0.0).hash(&mut h);
                    }
                }
                Op::SegmentMax { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.iter().for_each(|a| a.hash(&mut h));
                }
                Op::QuatNormalize { flipped, .. } => {
                    i.hash(&mut h);
                    flipped.hash(&mut h);
                }
                Op::Fixed(f) => {
                    i.hash(&mut h);
                    f.branch.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradients of the scalar `out` (seeded with 1).
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Array2::ones((1, 1)));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn propagate(&self, op: &Op, y: &Array2<f64>, dy: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |v: Var, g: Array2<f64>| {
            if !self.nodes[v.0].grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    acc(*a, dy.dot(&self.value(*b).t()));
                }
                if self.requires_grad(*b) {
                    acc(*b, self.value(*a).t().dot(dy));
                }
            }
            Op::AddRow(x, b) => {
                acc(*x, dy.clone());
                acc(*b, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                acc(*b, -dy);
            }
            Op::Mul(a, b) => {
                acc(*a, dy * self.value(*b));
                acc(*b, dy * self.value(*a));
            }
            Op::Affine(x, scale) => acc(*x, dy * *scale),
            Op::Relu(x) => {
                let mut g = dy.clone();
                g.zip_mut_with(self.value(*x), |d, &e| {
                    if e <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*x, g);
            }
            Op::LeakyRelu(x, slope) => {
                let mut g = dy.clone();
                g.zip_mut_with(self.value(*x), |d, &e| {
                    if e <= 0.0 {
                        *d *= slope
                    }
                });
                acc(*x, g);
            }
            Op::SegmentMax { x, argmax } => {
                let mut g = Array2::zeros(self.value(*x).dim());
                for ((gi, j), &r) in argmax.indexed_iter() {
                    g[[r, j]] += dy[[gi, j]];
                }
                acc(*x, g);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    acc(*p, dy.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::SliceCols(x, start) => {
                let mut g = Array2::zeros(self.value(*x).dim());
                g.slice_mut(s![.., *start..*start + dy.ncols()]).assign(dy);
                acc(*x, g);
            }
            Op::GatherRows(x, index) => {
                let mut g = Array2::zeros(self.value(*x).dim());
                for (i, &r) in index.iter().enumerate() {
                    let mut gr = g.row_mut(r);
                    gr += &dy.row(i);
                }
                acc(*x, g);
            }
            Op::Transpose(x) => acc(*x, dy.t().to_owned()),
            Op::SoftmaxRows(x) => {
                let mut g = dy * y;
                for (mut gr, yr) in g.rows_mut().into_iter().zip(y.rows()) {
                    let s = gr.sum();
                    gr.zip_mut_with(&yr, |a, &b| *a -= b * s);
                }
                acc(*x, g);
            }
            Op::LayerNormRows { x, inv_std } => {
                let m = y.ncols() as f64;
                let mut g = Array2::zeros(y.dim());
                for (i, mut gr) in g.rows_mut().into_iter().enumerate() {
                    let (d, xh) = (dy.row(i), y.row(i));
                    let mean_d = d.sum() / m;
                    let mean_dx = d.dot(&xh) / m;
                    for j in 0..y.ncols() {
                        gr[j] = inv_std[i] * (d[j] - mean_d - xh[j] * mean_dx);
                    }
                }
                acc(*x, g);
            }
            Op::MulRow(x, gain) => {
                acc(*x, dy * &row(self.value(*gain)));
                if self.requires_grad(*gain) {
                    acc(*gain, (dy * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::NormalizeRows(x) => {
                let xv = self.value(*x);
                let mut g = Array2::zeros(y.dim());
                for i in 0..y.nrows() {
                    let n = xv.row(i).dot(&xv.row(i)).sqrt();
                    let proj = y.row(i).dot(&dy.row(i));
                    for j in 0..y.ncols() {
                        g[[i, j]] = (dy[[i, j]] - y[[i, j]] * proj) / n;
                    }
                }
                acc(*x, g);
            }
            Op::RowDot(a, b) => {
                let col = dy.column(0).insert_axis(Axis(1));
                acc(*a, self.value(*b) * &col);
                acc(*b, self.value(*a) * &col);
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x);
                let mut g = xv.clone();
                for (i, mut gr) in g.rows_mut().into_iter().enumerate() {
                    let n = y[[i, 0]];
                    if n > 0.0 {
                        gr *= dy[[i, 0]] / n;
                    } else {
                        gr.fill(0.0);
                    }
                }
                acc(*x, g);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, Array2::from_elem(self.value(*x).dim(), dy[[0, 0]] / n));
            }
            Op::QuatNormalize { q, flipped } => {
                let qv = self.value(*q);
                let mut g = Array2::zeros(qv.dim());
                for i in 0..qv.nrows() {
                    let n = qv.row(i).dot(&qv.row(i)).sqrt();
                    let sign = if flipped[i] { -1.0 } else { 1.0 };
                    // y = sign·u with u = q/|q|
                    let u = qv.row(i).mapv(|e| e / n);
                    let proj = u.dot(&dy.row(i));
                    for j in 0..4 {
                        g[[i, j]] = sign * (dy[[i, j]] - u[j] * proj) / n;
                    }
                }
                acc(*q, g);
            }
            Op::RigidApply { q, t, local, segment } => {
                let qv = self.value(*q);
                let teeth = qv.nrows();
                let mut gq = Array2::zeros((teeth, 4));
                let mut gt = Array2::zeros((teeth, 3));
                for l in 0..teeth {
                    let (w, u) = (qv[[l, 0]], [qv[[l, 1]], qv[[l, 2]], qv[[l, 3]]]);
                    for r in l * segment..(l + 1) * segment {
                        let v = [local[[r, 0]], local[[r, 1]], local[[r, 2]]];
                        let d = [dy[[r, 0]], dy[[r, 1]], dy[[r, 2]]];
                        let (dw, du) = rotate_vjp(w, u, v, d);
                        gq[[l, 0]] += dw;
                        for k in 0..3 {
                            gq[[l, k + 1]] += du[k];
                            gt[[l, k]] += d[k];
                        }
                    }
                }
                acc(*q, gq);
                acc(*t, gt);
            }
            Op::Fixed(f) => acc(f.input, &f.grad * dy[[0, 0]]),
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// `v + 2w(u×v) + 2(u(u·v) − v|u|²)`: the rotation of `v` by the unit
/// quaternion `(w, u)`, written as a polynomial in the quaternion.
pub(crate) fn rotate(w: f64, u: [f64; 3], v: [f64; 3]) -> [f64; 3] {
    let c = cross(u, v);
    let (uv, uu) = (dot(u, v), dot(u, u));
    [0, 1, 2].map(|k| v[k] + 2.0 * w * c[k] + 2.0 * (u[k] * uv - v[k] * uu))
}

/// Vector-Jacobian product of [`rotate`] with respect to `(w, u)`.
fn rotate_vjp(w: f64, u: [f64; 3], v: [f64; 3], d: [f64; 3]) -> (f64, [f64; 3]) {
    let dw = 2.0 * dot(d, cross(u, v));
    let vxd = cross(v, d);
    let (uv, du, dv) = (dot(u, v), dot(d, u), dot(d, v));
    let g = [0, 1, 2].map(|k| 2.0 * w * vxd[k] + 2.0 * uv * d[k] + 2.0 * du * v[k] - 4.0 * dv * u[k]);
    (dw, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rotate_matches_nalgebra() {
        let q = nalgebra::UnitQuaternion::from_euler_angles(0.3, -1.2, 0.7);
        let v = nalgebra::Vector3::new(1.0, -2.0, 0.5);
        let r = rotate(q.w, [q.i, q.j, q.k], [v.x, v.y, v.z]);
        let e = q * v;
        for k in 0..3 {
            assert!((r[k] - e[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_carry_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0]]);
        let b = t.variable(array![[3.0], [4.0]]);
        let c = t.matmul(a, b);
        assert!(t.requires_grad(c));
        let g = t.backward(c);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &array![[1.0], [2.0]]);
    }

    #[test]
    fn segment_max_routes_to_first_maximum() {
        let mut t = Tape::new();
        let x = t.variable(array![[1.0, 5.0], [1.0, 2.0], [0.0, 7.0], [3.0, 7.0]]);
        let m = t.segment_max(x, 2);
        assert_eq!(t.value(m), &array![[1.0, 5.0], [3.0, 7.0]]);
        let s = t.mean(m);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap(), &array![[0.25, 0.25], [0.0, 0.0], [0.0, 0.25], [0.25, 0.0]]);
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut t = Tape::new();
        let x = t.variable(array![[2.0]]);
        let y = t.mul(x, x);
        let z = t.add(y, x);
        let g = t.backward(z);
        assert_eq!(g.get(x).unwrap()[[0, 0]], 5.0);
    }

    #[test]
    fn quat_normalize_canonicalizes_sign() {
        let mut t = Tape::new();
        let q = t.variable(array![[-2.0, 0.0, 0.0, 0.0], [0.0, 3.0, 0.0, 4.0]]);
        let u = t.quat_normalize(q);
        assert_eq!(t.value(u), &array![[1.0, 0.0, 0.0, 0.0], [0.0, 0.6, 0.0, 0.8]]);
    }
}
