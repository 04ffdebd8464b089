mod common;

use arrange_core::metrics::PctMode;
use arrange_core::synthgen::{ArchSpec, CaseRecord, DatasetSpec, generate_dataset};
use arrange_model::network::ModelState;
use arrange_model::params::ParamStore;
use arrange_model::train::*;
use arrange_model::ModelError;
use common::*;
use ndarray::array;

fn tiny_records(cases: usize) -> Vec<CaseRecord> {
    let spec = DatasetSpec {
        cases,
        seed: 3,
        base: ArchSpec { points_per_tooth: 64, ..ArchSpec::default() },
        ..DatasetSpec::default()
    };
    generate_dataset(&spec).unwrap()
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        encoder: tiny_config(false),
        epochs: 2,
        batch_size: 2,
        collision_points: 64,
        optimizer: OptimizerConfig::adam(1e-3),
        seed: 5,
        ..TrainConfig::default()
    }
}

fn one_param(v: ndarray::Array2<f64>) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("p", v);
    s
}

#[test]
fn sgd_step_with_weight_decay_and_momentum() {
    let cfg = OptimizerConfig { kind: OptimizerKind::Sgd { momentum: 0.0 }, lr: 0.1, weight_decay: 0.5, ..OptimizerConfig::default() };
    let mut store = one_param(array![[1.0, -2.0]]);
    let mut opt = Optimizer::new(cfg, &store);
    opt.apply(&mut store, &[array![[0.2, 0.4]]], 0.1);
    // θ − lr·(g + wd·θ)
    let want = [1.0 - 0.1 * (0.2 + 0.5), -2.0 - 0.1 * (0.4 - 1.0)];
    for (a, b) in store.iter().next().unwrap().1.value.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }

    let cfg = OptimizerConfig { kind: OptimizerKind::Sgd { momentum: 0.9 }, lr: 1.0, weight_decay: 0.0, ..OptimizerConfig::default() };
    let mut store = one_param(array![[0.0]]);
    let mut opt = Optimizer::new(cfg, &store);
    for _ in 0..3 {
        opt.apply(&mut store, &[array![[1.0]]], 1.0);
    }
    // buffers 1, 1.9, 2.71
    assert!((store.iter().next().unwrap().1.value[[0, 0]] + 5.61).abs() < 1e-12);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::adam(0.01) };
    let mut store = one_param(array![[1.0, 1.0, 1.0]]);
    let mut opt = Optimizer::new(cfg, &store);
    opt.apply(&mut store, &[array![[3.0, -1e-3, 0.0]]], 0.01);
    let v = &store.iter().next().unwrap().1.value;
    assert!((v[[0, 0]] - 0.99).abs() < 1e-8);
    assert!((v[[0, 1]] - 1.01).abs() < 1e-5);
    assert_eq!(v[[0, 2]], 1.0);
}

#[test]
fn collision_weight_ramps_in() {
    let cfg = TrainConfig { epochs: 10, collision_warmup: 0.5, ..TrainConfig::default() };
    let lc: Vec<f64> = (0..10).map(|e| cfg.weights_at(e).lambda_c).collect();
    assert!((lc[0] - 0.4).abs() < 1e-12);
    assert!(lc.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(lc[4], 2.0);
    assert_eq!(lc[9], 2.0);
    assert_eq!(cfg.weights_at(0).lambda_r, 0.5);
    let now = TrainConfig { collision_warmup: 0.0, ..cfg };
    assert_eq!(now.weights_at(0).lambda_c, 2.0);
}

#[test]
fn smoke_run_emits_a_loadable_checkpoint_and_csv() {
    let records = tiny_records(4);
    let mut seen = Vec::new();
    let (net, state, log) = train(&tiny_train_config(), &records, |e, _, _| seen.push(e)).unwrap();
    assert_eq!(seen, vec![0, 1]);
    assert_eq!(log.steps.len(), 4);
    assert_eq!(log.epoch_loss.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    state.save(&dir.path().join("model.json")).unwrap();
    let back = ModelState::load(&dir.path().join("model.json")).unwrap();
    assert_eq!(back, state);
    log.write_csv(&dir.path().join("loss.csv")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,L_r,L_p,L_f,L_c,total");
    assert_eq!(csv.lines().count(), 5);
    let (report, per_case) = evaluate_model(&net, &back, &records, Default::default(), PctMode::PerCase).unwrap();
    assert_eq!(per_case.len(), 4);
    assert!(report.me_point.is_finite());
}

#[test]
fn fixed_seed_reproduces_the_run() {
    let records = tiny_records(4);
    let cfg = tiny_train_config();
    let (_, a, la) = train(&cfg, &records, |_, _, _| {}).unwrap();
    let (_, b, lb) = train(&cfg, &records, |_, _, _| {}).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let other = TrainConfig { seed: 6, ..cfg };
    let (_, c, _) = train(&other, &records, |_, _, _| {}).unwrap();
    assert_ne!(a, c);
}

#[test]
fn divergence_is_reported_with_its_step() {
    let records = tiny_records(2);
    let cfg = TrainConfig {
        optimizer: OptimizerConfig { kind: OptimizerKind::Sgd { momentum: 0.0 }, lr: 1e308, ..OptimizerConfig::default() },
        ..tiny_train_config()
    };
    match train(&cfg, &records, |_, _, _| {}) {
        Err(ModelError::NonFiniteLoss { step: Some(s), .. }) => assert!(s <= 1),
        other => panic!("expected NonFiniteLoss, got {:?}", other.map(|r| r.2)),
    }
}

#[test]
fn ground_truth_and_identity_predictions_score_as_expected() {
    let records = tiny_records(3);
    let gt: Vec<_> = records.iter().map(|r| r.gt_motions.clone()).collect();
    let (report, _) = evaluate_predictions(&records, &gt, Default::default(), PctMode::PerCase).unwrap();
    assert!(report.me_point < 1e-9 && report.me_trans < 1e-9 && report.me_rotat < 1e-5);
    assert!((report.auc - 100.0).abs() < 1e-12);
    let (ident, _) = evaluate_predictions(&records, &identity_predictions(&records), Default::default(), PctMode::PerCase).unwrap();
    let direct: f64 = records
        .iter()
        .map(|r| arrange_core::metrics::me_point(&r.initial, &r.target).unwrap())
        .sum::<f64>()
        / 3.0;
    assert!((ident.me_point - direct).abs() < 1e-12);
}

#[test]
fn invalid_configurations_are_rejected() {
    let records = tiny_records(1);
    for cfg in [
        TrainConfig { epochs: 0, ..tiny_train_config() },
        TrainConfig { ema_momentum: 1.0, ..tiny_train_config() },
        TrainConfig { collision_warmup: 2.0, ..tiny_train_config() },
    ] {
        assert!(matches!(train(&cfg, &records, |_, _, _| {}), Err(ModelError::Config(_))));
    }
    assert!(train(&tiny_train_config(), &[], |_, _, _| {}).is_err());
}
