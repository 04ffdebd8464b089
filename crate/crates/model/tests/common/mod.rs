#![allow(dead_code)]

use std::collections::BTreeMap;

use arrange_core::geometry::{Dentition, ToothLabel};
use arrange_core::synthgen::{generate_case, ArchSpec, CaseRecord, DatasetSpec};
use arrange_model::autodiff::{Tape, Var};
use arrange_model::network::EncoderConfig;
use arrange_model::params::{Bound, ParamStore};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;

/// Relative error with a floor so entries at FD noise level do not dominate.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs().max(n.abs()) + 1e-6)
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub worst_at: String,
}

impl FdReport {
    fn record(&mut self, a: f64, n: f64, at: impl FnOnce() -> String) {
        self.checked += 1;
        let e = rel_err(a, n);
        if e > self.worst {
            self.worst = e;
            self.worst_at = format!("{} (analytic {a:e}, numeric {n:e})", at());
        }
    }

    pub fn assert_ok(&self) {
        assert!(self.checked > 0, "nothing checked");
        assert!(self.worst <= FD_TOL, "worst relative error {:e} at {}", self.worst, self.worst_at);
    }
}

/// Central differences of the scalar built by `f` against the tape gradient,
/// for every element of every input. Steps that change the kink signature are
/// skipped.
pub fn check_inputs(inputs: &[Array2<f64>], f: impl Fn(&mut Tape, &[Var]) -> Var) -> FdReport {
    let eval = |xs: &[Array2<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone())).collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = eval(inputs);
    let base_sig = tape.kink_signature();
    let grads = tape.backward(out);
    let mut report = FdReport::default();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
        for idx in ndarray::indices(x.dim()) {
            let mut xs = inputs.to_vec();
            xs[i][idx] = x[idx] + FD_STEP;
            let (tp, _, op) = eval(&xs);
            xs[i][idx] = x[idx] - FD_STEP;
            let (tm, _, om) = eval(&xs);
            if tp.kink_signature() != base_sig || tm.kink_signature() != base_sig {
                report.skipped += 1;
                continue;
            }
            let n = (tp.scalar(op) - tm.scalar(om)) / (2.0 * FD_STEP);
            report.record(analytic[idx], n, || format!("input {i} {idx:?}"));
        }
    }
    report
}

/// Like [`check_inputs`] but over every scalar of a parameter store.
pub fn check_params(store: &ParamStore, f: impl Fn(&mut Tape, &Bound) -> Var) -> FdReport {
    let eval = |s: &ParamStore| {
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, true);
        let out = f(&mut tape, &b);
        (tape, b, out)
    };
    let (tape, bound, out) = eval(store);
    let base_sig = tape.kink_signature();
    let mut grads = tape.backward(out);
    let mut report = FdReport::default();
    let mut work = store.clone();
    for (pi, (id, p)) in store.iter().enumerate() {
        let analytic = grads.take(bound.vars()[pi]).unwrap_or_else(|| Array2::zeros(p.value.dim()));
        for idx in ndarray::indices(p.value.dim()) {
            let x = p.value[idx];
            work.get_mut(id)[idx] = x + FD_STEP;
            let (tp, _, op) = eval(&work);
            work.get_mut(id)[idx] = x - FD_STEP;
            let (tm, _, om) = eval(&work);
            work.get_mut(id)[idx] = x;
            if tp.kink_signature() != base_sig || tm.kink_signature() != base_sig {
                report.skipped += 1;
                continue;
            }
            let n = (tp.scalar(op) - tm.scalar(om)) / (2.0 * FD_STEP);
            report.record(analytic[idx], n, || format!("{}{idx:?}", p.name));
        }
    }
    report
}

pub fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// C = 8, N = 32 network used by the gradient and invariance tests.
pub fn tiny_config(conditioned: bool) -> EncoderConfig {
    EncoderConfig {
        feature_dim: 8,
        global_dim: 16,
        mlp_widths: vec![8],
        head_width: 16,
        attention_heads: 4,
        arch_hidden: 8,
        points_per_tooth: 32,
        conditioned,
        seed: 11,
        ..EncoderConfig::default()
    }
}

pub fn labels(fdi: &[u32]) -> Vec<ToothLabel> {
    fdi.iter().map(|&l| ToothLabel::new(l).unwrap()).collect()
}

fn restrict(d: &Dentition, keep: &[ToothLabel]) -> Dentition {
    let teeth = keep.iter().map(|l| d.get(*l).unwrap().clone());
    let inside = |(a, b): &(ToothLabel, ToothLabel)| keep.contains(a) && keep.contains(b);
    Dentition::with_pairs(
        teeth,
        d.neighbor_pairs().iter().copied().filter(inside),
        d.occlusal_pairs().iter().copied().filter(inside),
    )
    .unwrap()
}

/// Generated case with `points` points per tooth, cut down to `keep`.
pub fn small_record(keep: &[ToothLabel], points: usize, seed: u64) -> CaseRecord {
    let spec = DatasetSpec {
        cases: 1,
        seed,
        base: ArchSpec {
            points_per_tooth: points,
            ..ArchSpec::default()
        },
        ..DatasetSpec::default()
    };
    let full = generate_case(&spec, 0).unwrap();
    CaseRecord {
        initial: restrict(&full.initial, keep),
        target: restrict(&full.target, keep),
        gt_motions: keep.iter().map(|l| (*l, full.gt_motions[l])).collect::<BTreeMap<_, _>>(),
        arch_width: full.arch_width,
    }
}

/// Four teeth from three categories: 11, 12, 13, 14.
pub fn four_teeth(points: usize, seed: u64) -> CaseRecord {
    small_record(&labels(&[11, 12, 13, 14]), points, seed)
}
