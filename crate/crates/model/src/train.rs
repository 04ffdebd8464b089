//! Training loop, optimizers and batch inference/evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use arrange_core::collision::GridConfig;
use arrange_core::geometry::{fps_indices, quat_normalize, Dentition, RigidMotion, Tooth, ToothLabel};
use arrange_core::metrics::{evaluate_case, CaseMetrics, EvalReport, PctMode};
use arrange_core::synthgen::{augment, AugmentPolicy, ArchWidthVector, CaseRecord};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{ModelError, Result};
use crate::losses::{case_loss_graph, make_negative_pairs, CaseTargets, DenseClouds, LossComponents, LossWeights};
use crate::network::{CaseInput, EncoderConfig, ModelState, Network};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Cosine decay of the learning rate to `lr·final_lr_fraction` over training.
    pub cosine_decay: bool,
    pub final_lr_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd { momentum: 0.0 },
            lr: 1e-3,
            weight_decay: 1e-4,
            cosine_decay: false,
            final_lr_fraction: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            ..Self::default()
        }
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        if !self.cosine_decay || total <= 1 {
            return self.lr;
        }
        let frac = step as f64 / (total - 1) as f64;
        let lo = self.lr * self.final_lr_fraction;
        lo + 0.5 * (self.lr - lo) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Optimizer state, one slot per parameter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: usize,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = params.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect();
        Optimizer {
            config,
            step: 0,
            second: zeros.clone(),
            first: zeros,
        }
    }

    /// One update with gradients `grads` (same order as `params`).
    pub fn apply(&mut self, params: &mut ParamStore, grads: &[Array2<f64>], lr: f64) {
        self.step += 1;
        let wd = self.config.weight_decay;
        for (i, theta) in params.values_mut().enumerate() {
            let mut g = grads[i].clone();
            if wd > 0.0 {
                g.scaled_add(wd, theta);
            }
            match self.config.kind {
                OptimizerKind::Sgd { momentum } => {
                    if momentum > 0.0 {
                        let buf = &mut self.first[i];
                        buf.zip_mut_with(&g, |b, &x| *b = momentum * *b + x);
                        theta.scaled_add(-lr, buf);
                    } else {
                        theta.scaled_add(-lr, &g);
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    m.zip_mut_with(&g, |a, &x| *a = beta1 * *a + (1.0 - beta1) * x);
                    v.zip_mut_with(&g, |a, &x| *a = beta2 * *a + (1.0 - beta2) * x * x);
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    ndarray::Zip::from(theta).and(&*m).and(&*v).for_each(|t, &mi, &vi| {
                        *t -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                    });
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub weights: LossWeights,
    pub grid: GridConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub ema_momentum: f64,
    /// Per-epoch augmentation of each training case.
    pub augmentation: Option<AugmentPolicy>,
    /// Probability that a case is augmented in a given epoch.
    pub augment_probability: f64,
    /// Points per tooth used by the collision term.
    pub collision_points: usize,
    /// Fraction of the epochs over which `lambda_c` ramps linearly from 0.
    pub collision_warmup: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: EncoderConfig::default(),
            weights: LossWeights::default(),
            grid: GridConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 200,
            batch_size: 16,
            ema_momentum: crate::network::DEFAULT_MOMENTUM,
            augmentation: Some(AugmentPolicy::staging()),
            augment_probability: 0.5,
            collision_points: 256,
            collision_warmup: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.collision_points == 0 {
            return Err(ModelError::Config("epochs, batch_size and collision_points must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(ModelError::Config("ema_momentum must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.collision_warmup) {
            return Err(ModelError::Config("collision_warmup must lie in [0, 1]".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(ModelError::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }

    /// Loss weights in effect during `epoch` (0-based).
    pub fn weights_at(&self, epoch: usize) -> LossWeights {
        let warm = self.collision_warmup * self.epochs as f64;
        let ramp = if warm > 0.0 { ((epoch + 1) as f64 / warm).min(1.0) } else { 1.0 };
        LossWeights {
            lambda_c: self.weights.lambda_c * ramp,
            ..self.weights
        }
    }
}

/// Sampling indices of one case, fixed for the whole run.
///
/// Farthest-point sampling runs once on each target tooth; its first
/// `points_per_tooth` indices feed the network and the first
/// `collision_points` the collision term. Rigid motions preserve index
/// correspondence, so the same indices serve every pose of the case.
#[derive(Clone, Debug)]
pub struct Sampling {
    pub indices: BTreeMap<ToothLabel, Vec<usize>>,
    pub network: usize,
    pub collision: usize,
}

impl Sampling {
    pub fn new(target: &Dentition, network: usize, collision: usize) -> Result<Sampling> {
        let k = network.max(collision);
        let indices = target
            .teeth()
            .map(|t| Ok((t.label(), fps_indices(t.cloud(), k)?)))
            .collect::<Result<_>>()?;
        Ok(Sampling {
            indices,
            network,
            collision,
        })
    }

    fn select(&self, d: &Dentition, n: usize) -> Result<Dentition> {
        let teeth = d
            .teeth()
            .map(|t| {
                let idx = self
                    .indices
                    .get(&t.label())
                    .ok_or_else(|| ModelError::Shape(format!("no sampling for tooth {}", t.label())))?;
                Ok(Tooth::new(t.label(), t.cloud().select(&idx[..n]))?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dentition::with_pairs(
            teeth,
            d.neighbor_pairs().iter().copied(),
            d.occlusal_pairs().iter().copied(),
        )?)
    }

    /// Network-resolution copy of `d`.
    pub fn network_view(&self, d: &Dentition) -> Result<Dentition> {
        self.select(d, self.network)
    }

    pub fn collision_view(&self, d: &Dentition) -> Result<Dentition> {
        self.select(d, self.collision)
    }
}

fn block_centers(points: &Array2<f64>, per: usize) -> Array2<f64> {
    let teeth = points.nrows() / per;
    let mut out = Array2::zeros((teeth, 3));
    for l in 0..teeth {
        let block = points.slice(ndarray::s![l * per..(l + 1) * per, ..]);
        out.row_mut(l).assign(&block.mean_axis(Axis(0)).expect("non-empty"));
    }
    out
}

/// One training example laid out for the tape.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: CaseInput,
    pub targets: CaseTargets,
    pub arch: ArchWidthVector,
}

pub fn make_sample(record: &CaseRecord, sampling: &Sampling, negative_seed: u64) -> Result<Sample> {
    let initial = sampling.network_view(&record.initial)?;
    let target = sampling.network_view(&record.target)?;
    let input = CaseInput::new(&initial)?;
    let tgt = CaseInput::new(&target)?;
    let neg = CaseInput::new(&make_negative_pairs(&target, negative_seed)?)?;
    let mut quats = Array2::zeros((input.teeth(), 4));
    for (l, label) in input.labels.iter().enumerate() {
        let m = record
            .gt_motions
            .get(label)
            .ok_or_else(|| ModelError::Shape(format!("no ground-truth motion for tooth {label}")))?;
        let q = quat_normalize(m.q)?;
        for k in 0..4 {
            quats[[l, k]] = q[k];
        }
    }
    let dense_d = sampling.collision_view(&record.initial)?;
    let dense = CaseInput::new(&dense_d)?;
    let slot: BTreeMap<ToothLabel, usize> = input.labels.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    let pairs = record
        .initial
        .all_pairs()
        .map(|(u, v)| (slot[&u], slot[&v]))
        .collect();
    let targets = CaseTargets {
        centers: block_centers(&tgt.points, tgt.per_tooth),
        points: tgt.points,
        quats,
        negatives: (neg.points, neg.centers),
        dense: DenseClouds {
            points: dense.points,
            per_tooth: dense.per_tooth,
            pairs,
        },
    };
    Ok(Sample {
        input,
        targets,
        arch: record.arch_width,
    })
}

/// Loss components and parameter gradients of one sample.
pub fn sample_gradients(
    net: &Network,
    state: &ModelState,
    sample: &Sample,
    weights: &LossWeights,
    grid: GridConfig,
) -> Result<(LossComponents, f64, Vec<Array2<f64>>)> {
    let mut tape = Tape::new();
    let online = state.online.bind(&mut tape, true);
    let target = state.target.bind(&mut tape, false);
    let arch = net.config.conditioned.then_some(&sample.arch);
    let graph = net.build(&mut tape, &online, &sample.input, arch)?;
    let losses = case_loss_graph(&mut tape, net, &target, &graph, &sample.input, &sample.targets, weights, grid)?;
    let total = tape.scalar(losses.total);
    let comps = losses.components(&tape);
    let mut grads = tape.backward(losses.total);
    let out = online
        .vars()
        .iter()
        .zip(state.online.iter())
        .map(|(v, (_, p))| grads.take(*v).unwrap_or_else(|| Array2::zeros(p.value.dim())))
        .collect();
    Ok((comps, total, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub losses: LossComponents,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    /// Mean total loss over the cases of each epoch.
    pub epoch_loss: Vec<f64>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,L_r,L_p,L_f,L_c,total\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.step, s.losses.l_r, s.losses.l_p, s.losses.l_f, s.losses.l_c, s.total
            ));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| ModelError::io(path, e))
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x1_0000_0001).wrapping_add(b));
    rng.random()
}

/// Trains a fresh model on `records`. `on_epoch` sees each finished epoch.
pub fn train(
    config: &TrainConfig,
    records: &[CaseRecord],
    mut on_epoch: impl FnMut(usize, &ModelState, &TrainLog),
) -> Result<(Network, ModelState, TrainLog)> {
    config.validate()?;
    if records.is_empty() {
        return Err(arrange_core::Error::EmptyInput("training cases").into());
    }
    let (net, mut state) = ModelState::new(config.encoder.clone())?;
    state.momentum = config.ema_momentum;
    let samplings = records
        .par_iter()
        .map(|r| Sampling::new(&r.target, config.encoder.points_per_tooth, config.collision_points))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Optimizer::new(config.optimizer, &state.online);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps_per_epoch = records.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let weights = config.weights_at(epoch);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let case_seed = mix(config.seed, epoch as u64, i as u64);
                    let record = match config.augmentation {
                        Some(policy) if rng_unit(case_seed) < config.augment_probability => {
                            augment(&records[i], policy, case_seed)?
                        }
                        _ => records[i].clone(),
                    };
                    let sample = make_sample(&record, &samplings[i], case_seed ^ 0x5eed)?;
                    sample_gradients(&net, &state, &sample, &weights, config.grid)
                })
                .collect::<Vec<Result<_>>>();
            let b = batch.len() as f64;
            let mut grads: Option<Vec<Array2<f64>>> = None;
            let mut comps = LossComponents::default();
            let mut total = 0.0;
            for r in results {
                let (c, t, g) = r?;
                if !t.is_finite() {
                    log::error!("non-finite loss at step {}: {c:?}", log.steps.len());
                    return Err(ModelError::NonFiniteLoss {
                        step: Some(log.steps.len()),
                        detail: format!("{c:?}"),
                    });
                }
                comps.add(&c);
                total += t;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                }
            }
            let mut grads = grads.expect("non-empty batch");
            grads.iter_mut().for_each(|g| *g /= b);
            let lr = config.optimizer.lr_at(opt.step, total_steps);
            opt.apply(&mut state.online, &grads, lr);
            if let Some((_, p)) = state.online.iter().find(|(_, p)| p.value.iter().any(|v| !v.is_finite())) {
                log::error!("parameter {} non-finite after step {}", p.name, log.steps.len());
                return Err(ModelError::NonFiniteLoss {
                    step: Some(log.steps.len()),
                    detail: format!("parameter {} diverged", p.name),
                });
            }
            state.ema_update(config.ema_momentum)?;
            epoch_sum += total;
            log.steps.push(StepLog {
                step: log.steps.len(),
                epoch,
                losses: comps.scaled(1.0 / b),
                total: total / b,
            });
        }
        log.epoch_loss.push(epoch_sum / records.len() as f64);
        log::info!("epoch {epoch}: mean loss {:.5}", log.epoch_loss[epoch]);
        on_epoch(epoch, &state, &log);
    }
    Ok((net, state, log))
}

fn rng_unit(seed: u64) -> f64 {
    ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_a5a5).random()
}

/// Predicted motions for `record.initial`, centred at the network-resolution
/// barycenters.
pub fn predict(
    net: &Network,
    state: &ModelState,
    record: &CaseRecord,
    sampling: &Sampling,
    arch: Option<&ArchWidthVector>,
) -> Result<BTreeMap<ToothLabel, RigidMotion>> {
    let input = CaseInput::new(&sampling.network_view(&record.initial)?)?;
    Ok(state.forward_input(net, &input, arch)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub index: usize,
    pub metrics: CaseMetrics,
}

/// Scores `predictions` (one motion map per record) on the dense clouds.
pub fn evaluate_predictions(
    records: &[CaseRecord],
    predictions: &[BTreeMap<ToothLabel, RigidMotion>],
    grid: GridConfig,
    mode: PctMode,
) -> Result<(EvalReport, Vec<CaseEvaluation>)> {
    let per_case = records
        .par_iter()
        .zip(predictions)
        .enumerate()
        .map(|(index, (r, p))| {
            Ok(CaseEvaluation {
                index,
                metrics: evaluate_case(&r.initial, p, &r.target, &r.gt_motions, grid)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let metrics: Vec<CaseMetrics> = per_case.iter().map(|c| c.metrics.clone()).collect();
    Ok((EvalReport::from_cases(&metrics, mode)?, per_case))
}

/// Runs the model on every record and scores the result.
pub fn evaluate_model(
    net: &Network,
    state: &ModelState,
    records: &[CaseRecord],
    grid: GridConfig,
    mode: PctMode,
) -> Result<(EvalReport, Vec<CaseEvaluation>)> {
    let preds = records
        .par_iter()
        .map(|r| {
            let s = Sampling::new(&r.target, net.config.points_per_tooth, net.config.points_per_tooth)?;
            let arch = net.config.conditioned.then_some(&r.arch_width);
            predict(net, state, r, &s, arch)
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(records, &preds, grid, mode)
}

/// Identity motions for every tooth of every record.
pub fn identity_predictions(records: &[CaseRecord]) -> Vec<BTreeMap<ToothLabel, RigidMotion>> {
    records
        .iter()
        .map(|r| {
            r.initial
                .teeth()
                .map(|t| {
                    (
                        t.label(),
                        RigidMotion {
                            c: t.barycenter(),
                            ..RigidMotion::identity()
                        },
                    )
                })
                .collect()
        })
        .collect()
}
