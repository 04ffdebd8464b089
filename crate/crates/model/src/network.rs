//! The arrangement network: per-tooth geometric and positional encoders, a
//! global encoder, attention-based feature propagation, feature projection
//! and motion regression, plus the optional arch-width conditioning.

use std::collections::BTreeMap;
use std::path::Path;

use arrange_core::geometry::{quat_normalize, Dentition, RigidMotion, ToothLabel, Vec3};
use arrange_core::synthgen::ArchWidthVector;
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ModelError, Result};
use crate::layers::{Activation, AttentionBlock, Linear, Mlp, PointEncoder};
use crate::params::{Bound, ParamStore};

/// Raw quaternion outputs shorter than this cannot be normalized.
const MIN_QUAT_NORM: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Per-tooth feature size `C`.
    pub feature_dim: usize,
    pub global_dim: usize,
    /// Hidden widths of the per-point MLPs.
    pub mlp_widths: Vec<usize>,
    /// Hidden width of the projection and regression MLPs.
    pub head_width: usize,
    pub attention_heads: usize,
    pub arch_hidden: usize,
    /// Points sampled per tooth as network input.
    pub points_per_tooth: usize,
    /// Coordinates (mm) are multiplied by this before entering the network.
    pub coord_scale: f64,
    /// Adds the arch-width embedding to the global feature.
    pub conditioned: bool,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            feature_dim: 64,
            global_dim: 128,
            mlp_widths: vec![64, 64],
            head_width: 128,
            attention_heads: 4,
            arch_hidden: 64,
            points_per_tooth: 64,
            coord_scale: 0.1,
            conditioned: false,
            leaky_slope: 0.01,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.feature_dim == 0 || self.global_dim == 0 || self.head_width == 0 || self.arch_hidden == 0 {
            return bad("feature_dim, global_dim, head_width and arch_hidden must be > 0".into());
        }
        if self.mlp_widths.contains(&0) {
            return bad("mlp_widths entries must be > 0".into());
        }
        if self.attention_heads == 0 || !self.feature_dim.is_multiple_of(self.attention_heads) {
            return bad(format!(
                "feature_dim {} must be a multiple of attention_heads {}",
                self.feature_dim, self.attention_heads
            ));
        }
        if self.points_per_tooth == 0 {
            return bad("points_per_tooth must be > 0".into());
        }
        if !(self.coord_scale.is_finite() && self.coord_scale > 0.0) {
            return bad("coord_scale must be positive".into());
        }
        Ok(())
    }
}

/// Layer layout. The two local encoders are created first so that their
/// parameters form a prefix of the store, which the EMA target copy mirrors.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: EncoderConfig,
    pub geo: PointEncoder,
    pub pos: PointEncoder,
    pub global: PointEncoder,
    pub arch: Option<(Linear, Linear)>,
    pub prop_geo: AttentionBlock,
    pub prop_pos: AttentionBlock,
    pub projector: Mlp,
    pub regressor: Mlp,
    /// Number of leading parameters belonging to the local encoders.
    pub local_params: usize,
}

impl Network {
    pub fn new(config: EncoderConfig) -> Result<(Network, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (c, g, h) = (config.feature_dim, config.global_dim, config.head_width);
        let geo = PointEncoder::new(&mut store, "geo", 3, &config.mlp_widths, c, &mut rng);
        let pos = PointEncoder::new(&mut store, "pos", 3, &config.mlp_widths, c, &mut rng);
        let local_params = store.len();
        let global = PointEncoder::new(&mut store, "global", 6, &config.mlp_widths, g, &mut rng);
        let arch = config.conditioned.then(|| {
            (
                Linear::new(&mut store, "arch.0", 12, config.arch_hidden, &mut rng),
                Linear::new(&mut store, "arch.1", config.arch_hidden, g, &mut rng),
            )
        });
        let prop_geo = AttentionBlock::new(&mut store, "prop_geo", c, config.attention_heads, &mut rng);
        let prop_pos = AttentionBlock::new(&mut store, "prop_pos", c, config.attention_heads, &mut rng);
        let projector = Mlp::new(&mut store, "proj", &[g + 2 * c, h, h, c], Activation::Relu, &mut rng);
        let regressor = Mlp::new(&mut store, "motion", &[3 * c + 3, h, h, 7], Activation::Relu, &mut rng);
        let last = regressor.layers.last().expect("three layers");
        store.get_mut(last.w).fill(0.0);
        *store.get_mut(last.b) = Array2::from_shape_vec((1, 7), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let net = Network {
            config,
            geo,
            pos,
            global,
            arch,
            prop_geo,
            prop_pos,
            projector,
            regressor,
            local_params,
        };
        Ok((net, store))
    }

    fn scaled(&self, a: &Array2<f64>) -> Array2<f64> {
        a * self.config.coord_scale
    }

    /// `(f_geo, f_pos)`: `T × C` each, from barycenter-centered and raw clouds.
    pub fn encode_local(&self, tape: &mut Tape, p: &Bound, points: &Array2<f64>, centers: &Array2<f64>) -> (Var, Var) {
        let n = points.nrows() / centers.nrows();
        let mut centered = points.clone();
        for (l, c) in centers.rows().into_iter().enumerate() {
            let mut block = centered.slice_mut(ndarray::s![l * n..(l + 1) * n, ..]);
            block -= &c;
        }
        let centered = tape.constant(self.scaled(&centered));
        let raw = tape.constant(self.scaled(points));
        let f_geo = self.geo.forward(tape, p, centered, n);
        let f_pos = self.pos.forward(tape, p, raw, n);
        (f_geo, f_pos)
    }

    /// `1 × global_dim` from every point concatenated with its barycenter.
    pub fn encode_global(&self, tape: &mut Tape, p: &Bound, points: &Array2<f64>, centers: &Array2<f64>) -> Var {
        let n = points.nrows() / centers.nrows();
        let expanded = centers.select(Axis(0), &(0..points.nrows()).map(|r| r / n).collect::<Vec<_>>());
        let input = ndarray::concatenate(Axis(1), &[points.view(), expanded.view()]).expect("same rows");
        let x = tape.constant(self.scaled(&input));
        self.global.forward(tape, p, x, points.nrows())
    }

    /// Arch-width embedding (`1 × global_dim`); `None` for unconditioned networks.
    pub fn embed_arch_width(&self, tape: &mut Tape, p: &Bound, x: &[f64; 12]) -> Option<Var> {
        let (l1, l2) = self.arch.as_ref()?;
        let input = tape.constant(Array2::from_shape_vec((1, 12), x.to_vec()).unwrap() * self.config.coord_scale);
        let h = l1.forward(tape, p, input);
        let h = tape.leaky_relu(h, self.config.leaky_slope);
        Some(l2.forward(tape, p, h))
    }

    pub fn propagate(&self, tape: &mut Tape, p: &Bound, f_geo: Var, f_pos: Var) -> (Var, Var) {
        (self.prop_geo.forward(tape, p, f_geo), self.prop_pos.forward(tape, p, f_pos))
    }

    /// Predicted target-pose positional feature per tooth (`T × C`).
    pub fn project(&self, tape: &mut Tape, p: &Bound, f_global: Var, h_geo: Var, h_pos: Var) -> Var {
        let teeth = tape.value(h_geo).nrows();
        let g = tape.broadcast_rows(f_global, teeth);
        let x = tape.concat_cols(&[g, h_geo, h_pos]);
        self.projector.forward(tape, p, x)
    }

    /// Raw `T × 7` regression output `[q′ (w, x, y, z) | t·coord_scale]`.
    pub fn regress(&self, tape: &mut Tape, p: &Bound, f_geo: Var, centers: &Array2<f64>, f_pos: Var, f_proj: Var) -> Var {
        let c = tape.constant(self.scaled(centers));
        let x = tape.concat_cols(&[f_geo, c, f_pos, f_proj]);
        self.regressor.forward(tape, p, x)
    }

    /// Full forward graph of one case.
    pub fn build(&self, tape: &mut Tape, p: &Bound, input: &CaseInput, arch: Option<&ArchWidthVector>) -> Result<Graph> {
        if input.per_tooth != self.config.points_per_tooth {
            return Err(ModelError::Shape(format!(
                "network expects {} points per tooth, got {}",
                self.config.points_per_tooth, input.per_tooth
            )));
        }
        let (f_geo, f_pos) = self.encode_local(tape, p, &input.points, &input.centers);
        let mut f_global = self.encode_global(tape, p, &input.points, &input.centers);
        match (arch, self.config.conditioned) {
            (Some(x), true) => {
                let e = self.embed_arch_width(tape, p, &x.to_array()).expect("conditioned");
                f_global = tape.add(f_global, e);
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(ModelError::Config("arch width given to an unconditioned model".into()))
            }
            (None, true) => return Err(ModelError::Config("conditioned model needs an arch width vector".into())),
        }
        let (h_geo, h_pos) = self.propagate(tape, p, f_geo, f_pos);
        let f_proj = self.project(tape, p, f_global, h_geo, h_pos);
        let raw = self.regress(tape, p, f_geo, &input.centers, f_pos, f_proj);
        let q_raw = tape.slice_cols(raw, 0, 4);
        for (l, r) in tape.value(q_raw).rows().into_iter().enumerate() {
            let n = r.dot(&r).sqrt();
            if !(n > MIN_QUAT_NORM) {
                log::warn!("tooth {}: degenerate quaternion output", input.labels[l]);
                return Err(arrange_core::Error::DegenerateQuaternion(n).into());
            }
        }
        let q = tape.quat_normalize(q_raw);
        let t_scaled = tape.slice_cols(raw, 4, 3);
        let t = tape.affine(t_scaled, 1.0 / self.config.coord_scale, 0.0);
        Ok(Graph {
            f_geo,
            f_pos,
            f_global,
            h_geo,
            h_pos,
            f_proj,
            q,
            t,
        })
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Graph {
    pub f_geo: Var,
    pub f_pos: Var,
    pub f_global: Var,
    pub h_geo: Var,
    pub h_pos: Var,
    pub f_proj: Var,
    /// `T × 4` unit quaternions, `w ≥ 0`.
    pub q: Var,
    /// `T × 3` translations (mm).
    pub t: Var,
}

/// A dentition laid out for the network: every tooth contributes the same
/// number of points, in label order.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseInput {
    pub labels: Vec<ToothLabel>,
    /// `T·N × 3`, tooth blocks in label order.
    pub points: Array2<f64>,
    /// `T × 3` barycenters (rotation centers).
    pub centers: Array2<f64>,
    pub per_tooth: usize,
}

impl CaseInput {
    pub fn new(dentition: &Dentition) -> Result<CaseInput> {
        let n = dentition.teeth().next().map_or(0, |t| t.cloud().len());
        if n == 0 {
            return Err(arrange_core::Error::EmptyInput("dentition").into());
        }
        let teeth = dentition.len();
        let mut points = Array2::zeros((teeth * n, 3));
        let mut centers = Array2::zeros((teeth, 3));
        let mut labels = Vec::with_capacity(teeth);
        for (l, tooth) in dentition.teeth().enumerate() {
            if tooth.cloud().len() != n {
                return Err(ModelError::Shape(format!(
                    "tooth {} has {} points, expected {n}",
                    tooth.label(),
                    tooth.cloud().len()
                )));
            }
            for (i, p) in tooth.cloud().points().iter().enumerate() {
                for k in 0..3 {
                    points[[l * n + i, k]] = p[k];
                }
            }
            let c = tooth.barycenter();
            for k in 0..3 {
                centers[[l, k]] = c[k];
            }
            labels.push(tooth.label());
        }
        Ok(CaseInput {
            labels,
            points,
            centers,
            per_tooth: n,
        })
    }

    pub fn teeth(&self) -> usize {
        self.labels.len()
    }

    pub fn center(&self, l: usize) -> Vec3 {
        Vec3::new(self.centers[[l, 0]], self.centers[[l, 1]], self.centers[[l, 2]])
    }
}

/// Per-tooth features of one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub f_geo: BTreeMap<ToothLabel, Vec<f64>>,
    pub f_pos: BTreeMap<ToothLabel, Vec<f64>>,
    pub h_geo: BTreeMap<ToothLabel, Vec<f64>>,
    pub h_pos: BTreeMap<ToothLabel, Vec<f64>>,
    pub f_proj: BTreeMap<ToothLabel, Vec<f64>>,
    pub f_global: Vec<f64>,
}

impl FeatureBundle {
    pub fn from_graph(tape: &Tape, g: &Graph, labels: &[ToothLabel]) -> FeatureBundle {
        let map = |v: Var| -> BTreeMap<ToothLabel, Vec<f64>> {
            labels
                .iter()
                .zip(tape.value(v).rows())
                .map(|(l, r)| (*l, r.to_vec()))
                .collect()
        };
        FeatureBundle {
            f_geo: map(g.f_geo),
            f_pos: map(g.f_pos),
            h_geo: map(g.h_geo),
            h_pos: map(g.h_pos),
            f_proj: map(g.f_proj),
            f_global: tape.value(g.f_global).row(0).to_vec(),
        }
    }
}

/// Motions read off a built graph, each centred at its tooth's barycenter.
pub fn motions_from_graph(tape: &Tape, g: &Graph, input: &CaseInput) -> Result<BTreeMap<ToothLabel, RigidMotion>> {
    let (q, t) = (tape.value(g.q), tape.value(g.t));
    input
        .labels
        .iter()
        .enumerate()
        .map(|(l, &label)| {
            let qn = quat_normalize([q[[l, 0]], q[[l, 1]], q[[l, 2]], q[[l, 3]]])?;
            let m = RigidMotion {
                q: qn,
                t: Vec3::new(t[[l, 0]], t[[l, 1]], t[[l, 2]]),
                c: input.center(l),
            };
            Ok((label, m))
        })
        .collect()
}

/// Online parameters, EMA target copies of the two local encoders, and the
/// configuration needed to rebuild the layer layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: EncoderConfig,
    pub online: ParamStore,
    pub target: ParamStore,
    pub momentum: f64,
    pub seed: u64,
}

pub const DEFAULT_MOMENTUM: f64 = 0.99;

impl ModelState {
    pub fn new(config: EncoderConfig) -> Result<(Network, ModelState)> {
        let (net, online) = Network::new(config.clone())?;
        let target = online.prefix(net.local_params);
        let seed = config.seed;
        Ok((
            net,
            ModelState {
                config,
                online,
                target,
                momentum: DEFAULT_MOMENTUM,
                seed,
            },
        ))
    }

    /// Rebuilds the layer layout and checks every stored shape against it.
    pub fn network(&self) -> Result<Network> {
        let (net, fresh) = Network::new(self.config.clone())?;
        let mismatch = |which: &str| ModelError::Shape(format!("{which} parameters do not match the configuration"));
        if fresh.len() != self.online.len() || self.target.len() != net.local_params {
            return Err(mismatch("stored"));
        }
        for ((_, a), (_, b)) in fresh.iter().zip(self.online.iter()) {
            if a.value.dim() != b.value.dim() || a.name != b.name {
                return Err(mismatch("online"));
            }
        }
        for ((_, a), (_, b)) in fresh.iter().zip(self.target.iter()) {
            if a.value.dim() != b.value.dim() {
                return Err(mismatch("target"));
            }
        }
        Ok(net)
    }

    /// `θ_target ← m·θ_target + (1 − m)·θ_online` for the local encoders.
    pub fn ema_update(&mut self, momentum: f64) -> Result<()> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(ModelError::Config(format!("EMA momentum {momentum} outside [0, 1)")));
        }
        for (i, t) in self.target.values_mut().enumerate() {
            let o = self.online.get(crate::params::ParamId(i));
            if momentum == 0.0 {
                t.assign(o);
            } else {
                t.zip_mut_with(o, |a, &b| *a = momentum * *a + (1.0 - momentum) * b);
            }
        }
        Ok(())
    }

    /// Inference on a dentition whose teeth all hold `points_per_tooth` points.
    pub fn forward(
        &self,
        net: &Network,
        dentition: &Dentition,
        arch: Option<&ArchWidthVector>,
    ) -> Result<(BTreeMap<ToothLabel, RigidMotion>, FeatureBundle)> {
        let input = CaseInput::new(dentition)?;
        self.forward_input(net, &input, arch)
    }

    pub fn forward_input(
        &self,
        net: &Network,
        input: &CaseInput,
        arch: Option<&ArchWidthVector>,
    ) -> Result<(BTreeMap<ToothLabel, RigidMotion>, FeatureBundle)> {
        let mut tape = Tape::new();
        let p = self.online.bind(&mut tape, false);
        let g = net.build(&mut tape, &p, input, arch)?;
        Ok((motions_from_graph(&tape, &g, input)?, FeatureBundle::from_graph(&tape, &g, &input.labels)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| ModelError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| ModelError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ModelState> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::io(path, e))?;
        let state: ModelState = serde_json::from_str(&text).map_err(|e| ModelError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        state.network()?;
        Ok(state)
    }
}
