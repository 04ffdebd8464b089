use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(slope) => tape.leaky_relu(x, slope),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Weights and bias uniform in `±1/√input`.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Linear {
            w: store.add_uniform(format!("{name}.w"), (input, output), bound, rng),
            b: store.add_uniform(format!("{name}.b"), (1, output), bound, rng),
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p.var(self.w));
        tape.add_row(y, p.var(self.b))
    }
}

/// Linear layers with an activation between consecutive layers (none after
/// the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims = [input, hidden…, output]`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, p, x);
            if i < last {
                x = self.activation.apply(tape, x);
            }
        }
        x
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }
}

/// Shared per-point MLP followed by channel-wise max-pooling over each
/// tooth's points.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub mlp: Mlp,
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: &[usize], output: usize, rng: &mut impl Rng) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        PointEncoder {
            mlp: Mlp::new(store, name, &dims, Activation::Relu, rng),
        }
    }

    /// `points` holds consecutive blocks of `per_group` rows; one output row per block.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, points: Var, per_group: usize) -> Var {
        let h = self.mlp.forward(tape, p, points);
        tape.segment_max(h, per_group)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, dim))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let n = tape.layer_norm_rows(x, LAYER_NORM_EPS);
        let g = tape.mul_row(n, p.var(self.gain));
        tape.add_row(g, p.var(self.bias))
    }
}

/// One post-norm transformer encoder block over a set of tokens (rows).
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        AttentionBlock {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, 4 * dim, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), 4 * dim, dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            heads,
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let q = self.query.forward(tape, p, x);
        let k = self.key.forward(tape, p, x);
        let v = self.value.forward(tape, p, x);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.affine(scores, scale, 0.0);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let cat = tape.concat_cols(&heads);
        let attended = self.out.forward(tape, p, cat);
        let res = tape.add(x, attended);
        let h1 = self.norm1.forward(tape, p, res);
        let f = self.ff1.forward(tape, p, h1);
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, p, f);
        let res = tape.add(h1, f);
        self.norm2.forward(tape, p, res)
    }
}
