use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use arrange_core::geometry::{RigidMotion, ToothLabel};
use arrange_core::io::{read_cloud, write_json};
use arrange_core::metrics::{me_point, EvalReport};
use arrange_core::synthgen::{arch_width_of, generate_dataset, read_case, read_descriptor, write_dataset, CaseRecord};
use arrange_model::network::{ModelState, Network};
use arrange_model::train::{evaluate_predictions, identity_predictions, predict, train, CaseEvaluation, Sampling, TrainLog};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attach::{attach, trajectory_csv, AttachOutcome};
use crate::config::{RunConfig, Split};
use crate::error::{CliError, Result};
use crate::plot::{line_chart, Series};

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Archives the effective config and writes `result.json` and `summary.txt`.
pub fn write_outputs(out: &Path, cfg: &RunConfig, result: &impl Serialize, summary: &str) -> Result<()> {
    mkdir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    write_json(&out.join("result.json"), result)?;
    write_text(&out.join("summary.txt"), summary)
}

/// Records of one split, in case-name order.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<(String, CaseRecord)>> {
    let desc = read_descriptor(dir)?;
    let names = match split {
        Split::Train => desc.splits.train,
        Split::Val => desc.splits.val,
        Split::Test => desc.splits.test,
    };
    if names.is_empty() {
        return Err(CliError::Config(format!("split {split:?} of {} is empty", dir.display())));
    }
    names
        .into_par_iter()
        .map(|n| {
            let r = read_case(dir, &n)?;
            Ok((n, r))
        })
        .collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenResult {
    pub cases: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Mean point error of the unarranged cases.
    pub initial_me_point: f64,
    pub initial_me_point_min: f64,
    pub initial_me_point_max: f64,
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<GenResult> {
    let start = Instant::now();
    let records = generate_dataset(&cfg.dataset)?;
    let desc = write_dataset(out, &cfg.dataset, &records)?;
    let errors = records
        .par_iter()
        .map(|r| me_point(&r.initial, &r.target))
        .collect::<arrange_core::Result<Vec<f64>>>()?;
    let result = GenResult {
        cases: desc.cases,
        train: desc.splits.train.len(),
        val: desc.splits.val.len(),
        test: desc.splits.test.len(),
        initial_me_point: mean(errors.iter().copied()),
        initial_me_point_min: errors.iter().copied().fold(f64::INFINITY, f64::min),
        initial_me_point_max: errors.iter().copied().fold(0.0, f64::max),
    };
    let summary = format!(
        "generated {} cases (train {}, val {}, test {}) in {}\n\
         initial ME_point: mean {:.4} mm, range [{:.4}, {:.4}]\n\
         elapsed {:.2} s\n",
        result.cases,
        result.train,
        result.val,
        result.test,
        out.display(),
        result.initial_me_point,
        result.initial_me_point_min,
        result.initial_me_point_max,
        start.elapsed().as_secs_f64()
    );
    write_outputs(out, cfg, &result, &summary)?;
    print!("{summary}");
    Ok(result)
}

pub fn cmd_attach(cfg: &RunConfig, u: &Path, v: &Path, out: &Path) -> Result<AttachOutcome> {
    let start = Instant::now();
    let cu = read_cloud(u)?;
    let cv = read_cloud(v)?;
    let outcome = attach(&cu, &cv, &cfg.attach)?;
    mkdir(out)?;
    write_text(&out.join("trajectory.csv"), &trajectory_csv(&outcome.steps))?;
    let curve: Vec<(f64, f64)> = outcome.steps.iter().map(|s| (s.iter as f64, s.c)).collect();
    line_chart(
        &out.join("trajectory.svg"),
        "collision value during attachment",
        "iteration",
        "c (mm)",
        &[Series {
            name: "c",
            points: &curve,
        }],
    )?;
    if let Some(r) = &outcome.initial {
        write_json(&out.join("collision_initial.json"), r)?;
    }
    if let Some(r) = &outcome.last {
        write_json(&out.join("collision_final.json"), r)?;
    }
    let [x, y, z] = outcome.translation;
    let summary = format!(
        "{} after {} iterations: c {:.4} -> {:.4} mm (tol {})\n\
         translation of v: ({x:.4}, {y:.4}, {z:.4}), {:.4} mm along the initial normal\n\
         elapsed {:.3} s\n",
        if outcome.converged { "attached" } else { "not attached" },
        outcome.iterations,
        outcome.initial_c,
        outcome.final_c,
        cfg.attach.tol,
        outcome.displacement_along_normal,
        start.elapsed().as_secs_f64()
    );
    write_outputs(out, cfg, &outcome, &summary)?;
    print!("{summary}");
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub train_cases: usize,
    pub epochs: usize,
    pub steps: usize,
    pub epoch_loss: Vec<f64>,
    /// Relative to the output directory.
    pub checkpoint: PathBuf,
}

/// Trains on the train split and saves `model.json`, `loss.csv` and `loss.svg`.
pub fn train_model(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(Network, ModelState, TrainResult, TrainLog)> {
    cfg.validate()?;
    let records: Vec<CaseRecord> = load_split(data, Split::Train)?.into_iter().map(|(_, r)| r).collect();
    mkdir(out)?;
    let ckpt_dir = out.join("checkpoints");
    let mut save_error = None;
    let (net, state, log) = train(&cfg.train, &records, |epoch, state, _| {
        let every = cfg.checkpoint_every;
        if every > 0 && (epoch + 1) % every == 0 && save_error.is_none() {
            let path = ckpt_dir.join(format!("epoch_{:04}.json", epoch + 1));
            save_error = mkdir(&ckpt_dir).and_then(|_| Ok(state.save(&path)?)).err();
        }
    })?;
    if let Some(e) = save_error {
        return Err(e);
    }
    let checkpoint = PathBuf::from("model.json");
    state.save(&out.join(&checkpoint))?;
    log.write_csv(&out.join("loss.csv"))?;
    let per_epoch: Vec<(f64, f64)> = log.epoch_loss.iter().enumerate().map(|(e, &l)| ((e + 1) as f64, l)).collect();
    line_chart(
        &out.join("loss.svg"),
        "training loss",
        "epoch",
        "mean total loss",
        &[Series {
            name: "total",
            points: &per_epoch,
        }],
    )?;
    let result = TrainResult {
        train_cases: records.len(),
        epochs: cfg.train.epochs,
        steps: log.steps.len(),
        epoch_loss: log.epoch_loss.clone(),
        checkpoint,
    };
    Ok((net, state, result, log))
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainResult> {
    let start = Instant::now();
    let (_, _, result, _) = train_model(cfg, data, out)?;
    let first = result.epoch_loss.first().copied().unwrap_or(f64::NAN);
    let last = result.epoch_loss.last().copied().unwrap_or(f64::NAN);
    let summary = format!(
        "trained {} epochs ({} steps) on {} cases\n\
         mean loss: epoch 1 {first:.5}, epoch {} {last:.5}\n\
         checkpoint {}\n\
         elapsed {:.1} s\n",
        result.epochs,
        result.steps,
        result.train_cases,
        result.epochs,
        out.join(&result.checkpoint).display(),
        start.elapsed().as_secs_f64()
    );
    write_outputs(out, cfg, &result, &summary)?;
    print!("{summary}");
    Ok(result)
}

/// What produces the motions being scored.
#[derive(Clone, Debug)]
pub enum Predictor {
    Checkpoint(PathBuf),
    GroundTruth,
    Identity,
}

pub type Motions = BTreeMap<ToothLabel, RigidMotion>;

/// Loads a checkpoint and checks that it can run on `records`.
pub fn load_compatible(path: &Path, records: &[(String, CaseRecord)]) -> Result<(Network, ModelState)> {
    let state = ModelState::load(path).map_err(|e| match e {
        arrange_model::ModelError::Shape(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other.into(),
    })?;
    let net = state.network()?;
    let need = state.config.points_per_tooth;
    for (name, r) in records {
        if let Some(t) = r.initial.teeth().find(|t| t.cloud().len() < need) {
            return Err(CliError::Config(format!(
                "checkpoint samples {need} points per tooth but {name} tooth {} has {}",
                t.label(),
                t.cloud().len()
            )));
        }
    }
    Ok((net, state))
}

/// Model motions for every record; `offset` shifts the conditioning input.
pub fn model_predictions(
    net: &Network,
    state: &ModelState,
    records: &[(String, CaseRecord)],
    offset: Option<[f64; 2]>,
) -> Result<Vec<Motions>> {
    records
        .par_iter()
        .map(|(_, r)| {
            let n = net.config.points_per_tooth;
            let s = Sampling::new(&r.target, n, n)?;
            let arch = net.config.conditioned.then(|| match offset {
                Some([l, rt]) => r.arch_width.with_offset(l, rt),
                None => r.arch_width,
            });
            Ok(predict(net, state, r, &s, arch.as_ref())?)
        })
        .collect()
}

pub fn predictions(predictor: &Predictor, records: &[(String, CaseRecord)]) -> Result<Vec<Motions>> {
    match predictor {
        Predictor::GroundTruth => Ok(records.iter().map(|(_, r)| r.gt_motions.clone()).collect()),
        Predictor::Identity => {
            let plain: Vec<CaseRecord> = records.iter().map(|(_, r)| r.clone()).collect();
            Ok(identity_predictions(&plain))
        }
        Predictor::Checkpoint(path) => {
            let (net, state) = load_compatible(path, records)?;
            model_predictions(&net, &state, records, None)
        }
    }
}

pub fn score(cfg: &RunConfig, records: &[(String, CaseRecord)], preds: &[Motions]) -> Result<(EvalReport, Vec<CaseEvaluation>)> {
    let plain: Vec<CaseRecord> = records.iter().map(|(_, r)| r.clone()).collect();
    Ok(evaluate_predictions(&plain, preds, cfg.eval.grid, cfg.eval.pct_mode)?)
}

fn per_case_csv(records: &[(String, CaseRecord)], cases: &[CaseEvaluation]) -> String {
    let mut out = String::from("case,me_point,me_trans,me_rotat,mean_abs_c,max_abs_c,count_over\n");
    for c in cases {
        let m = &c.metrics;
        let g = &m.gap_stats;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            records[c.index].0, m.me_point, m.me_trans, m.me_rotat, g.mean_abs, g.max_abs, g.count_over
        );
    }
    out
}

pub fn cmd_eval(cfg: &RunConfig, data: &Path, predictor: &Predictor, out: &Path) -> Result<EvalReport> {
    let records = load_split(data, cfg.eval.split)?;
    let start = Instant::now();
    let preds = predictions(predictor, &records)?;
    let infer = start.elapsed().as_secs_f64();
    let (report, cases) = score(cfg, &records, &preds)?;
    mkdir(out)?;
    write_text(&out.join("per_case.csv"), &per_case_csv(&records, &cases))?;
    arrange_core::metrics::write_pct_csv(&out.join("pct.csv"), &report.pct_curve)?;
    line_chart(
        &out.join("pct.svg"),
        &format!("PCT curve, AUC {:.2}", report.auc),
        "threshold K (mm)",
        "fraction below K",
        &[Series {
            name: "PCT",
            points: &report.pct_curve,
        }],
    )?;
    let g = &report.gap_stats;
    let summary = format!(
        "{} cases ({:?} split), predictor {predictor:?}\n\
         ME_point {:.4} mm, ME_trans {:.4} mm, ME_rotat {:.4} deg, AUC {:.3}\n\
         neighbor gaps: mean|c| {:.4} mm, max|c| {:.4} mm, {} of {} pairs over 0.5 mm, {} unsupported\n\
         prediction {:.1} ms per case, total {:.2} s\n",
        report.cases,
        cfg.eval.split,
        report.me_point,
        report.me_trans,
        report.me_rotat,
        report.auc,
        g.mean_abs,
        g.max_abs,
        g.count_over,
        g.pairs,
        g.unsupported,
        1e3 * infer / records.len() as f64,
        start.elapsed().as_secs_f64()
    );
    write_outputs(out, cfg, &report, &summary)?;
    print!("{summary}");
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_c: f64,
    /// Per-case means of the neighbor-pair gap statistics on the eval split.
    pub mean_abs_d: f64,
    pub max_abs_d: f64,
    pub count: f64,
    pub me_point: f64,
}

fn lambda_dir(v: f64) -> String {
    format!("lambda_c_{v}")
}

/// Trains and evaluates one model per `cfg.sweep.lambda_c` value.
pub fn cmd_sweep_lambda_c(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<SweepRow>> {
    if cfg.sweep.lambda_c.is_empty() {
        return Err(CliError::Config("sweep.lambda_c is empty".into()));
    }
    let start = Instant::now();
    let eval_records = load_split(data, cfg.eval.split)?;
    let mut rows = Vec::new();
    for &v in &cfg.sweep.lambda_c {
        let mut run = cfg.clone();
        run.train.weights.lambda_c = v;
        let dir = out.join(lambda_dir(v));
        let (net, state, trained, _) = train_model(&run, data, &dir)?;
        write_json(&dir.join("train.json"), &trained)?;
        let preds = model_predictions(&net, &state, &eval_records, None)?;
        let (report, cases) = score(&run, &eval_records, &preds)?;
        write_json(&dir.join("eval.json"), &report)?;
        rows.push(SweepRow {
            lambda_c: v,
            mean_abs_d: mean(cases.iter().map(|c| c.metrics.gap_stats.mean_abs)),
            max_abs_d: mean(cases.iter().map(|c| c.metrics.gap_stats.max_abs)),
            count: mean(cases.iter().map(|c| c.metrics.gap_stats.count_over as f64)),
            me_point: report.me_point,
        });
    }
    let mut csv = String::from("lambda_c,mean_abs_d,max_abs_d,count\n");
    let mut summary = String::from("lambda_c  mean|d|   max|d|    count   ME_point\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.lambda_c, r.mean_abs_d, r.max_abs_d, r.count);
        let _ = writeln!(
            summary,
            "{:<9} {:<9.4} {:<9.4} {:<7.3} {:.4}",
            r.lambda_c, r.mean_abs_d, r.max_abs_d, r.count, r.me_point
        );
    }
    let _ = writeln!(summary, "elapsed {:.1} s", start.elapsed().as_secs_f64());
    write_text(&out.join("sweep.csv"), &csv)?;
    write_outputs(out, cfg, &rows, &summary)?;
    print!("{summary}");
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchRow {
    pub delta: [f64; 2],
    /// Mean over cases of the predicted arrangement's half widths (mm).
    pub left_width: f64,
    pub right_width: f64,
    pub total_width: f64,
    /// `left_width − right_width`.
    pub asymmetry: f64,
}

/// Predicted arch widths under each offset of `cfg.arch_sweep.deltas`.
pub fn arch_sweep(cfg: &RunConfig, records: &[(String, CaseRecord)], checkpoint: &Path) -> Result<Vec<ArchRow>> {
    let (net, state) = load_compatible(checkpoint, records)?;
    if !net.config.conditioned {
        return Err(CliError::Config(format!(
            "{} is an unconditioned model; arch-sweep needs arch-width conditioning",
            checkpoint.display()
        )));
    }
    cfg.arch_sweep
        .deltas
        .iter()
        .map(|&delta| {
            let preds = model_predictions(&net, &state, records, Some(delta))?;
            let widths = records
                .par_iter()
                .zip(&preds)
                .map(|((_, r), p)| Ok(arch_width_of(&r.initial.moved(p)?)?))
                .collect::<Result<Vec<_>>>()?;
            let left = mean(widths.iter().map(|w| w.left_width()));
            let right = mean(widths.iter().map(|w| w.right_width()));
            Ok(ArchRow {
                delta,
                left_width: left,
                right_width: right,
                total_width: left + right,
                asymmetry: left - right,
            })
        })
        .collect()
}

pub fn cmd_arch_sweep(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path) -> Result<Vec<ArchRow>> {
    let start = Instant::now();
    let records = load_split(data, cfg.eval.split)?;
    let rows = arch_sweep(cfg, &records, checkpoint)?;
    let target_left = mean(records.iter().map(|(_, r)| r.arch_width.left_width()));
    let target_right = mean(records.iter().map(|(_, r)| r.arch_width.right_width()));
    let mut csv = String::from("delta_left,delta_right,left_width,right_width,total_width,asymmetry\n");
    let mut summary = format!(
        "{} cases; target widths left {target_left:.3} mm, right {target_right:.3} mm\n\
         delta          left      right     total     left-right\n",
        records.len()
    );
    for r in &rows {
        let [dl, dr] = r.delta;
        let _ = writeln!(
            csv,
            "{dl},{dr},{},{},{},{}",
            r.left_width, r.right_width, r.total_width, r.asymmetry
        );
        let _ = writeln!(
            summary,
            "[{dl:+.1}, {dr:+.1}]   {:<9.3} {:<9.3} {:<9.3} {:+.3}",
            r.left_width, r.right_width, r.total_width, r.asymmetry
        );
    }
    let _ = writeln!(summary, "elapsed {:.2} s", start.elapsed().as_secs_f64());
    mkdir(out)?;
    write_text(&out.join("widths.csv"), &csv)?;
    write_outputs(out, cfg, &rows, &summary)?;
    print!("{summary}");
    Ok(rows)
}
