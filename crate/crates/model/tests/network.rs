mod common;

use std::collections::BTreeMap;

use arrange_core::collision::{dentition_collision_loss, GridConfig};
use arrange_core::geometry::{Dentition, PointCloud, RigidMotion, Tooth, ToothLabel, Vec3};
use arrange_model::autodiff::Tape;
use arrange_model::losses::{
    case_loss_graph, consistency_loss, parameter_loss, reconstruct_loss, ConsistencyBatch, LossWeights,
};
use arrange_model::network::{CaseInput, FeatureBundle, ModelState, Network};
use arrange_model::params::Bound;
use arrange_model::train::{make_sample, Sampling};
use arrange_model::ModelError;
use common::*;
use ndarray::{s, Array2, Axis};

/// Coordinates on a 1/64 grid, so sums of 32 points and integer shifts are exact.
fn dyadic(record_seed: u64) -> Dentition {
    let r = four_teeth(32, record_seed);
    let teeth = r.initial.teeth().map(|t| {
        let pts = t.cloud().points().iter().map(|p| p.map(|x| (x * 64.0).round() / 64.0)).collect();
        Tooth::new(t.label(), PointCloud::new(pts).unwrap()).unwrap()
    });
    Dentition::new(teeth.collect::<Vec<_>>()).unwrap()
}

fn features(net: &Network, state: &ModelState, d: &Dentition) -> FeatureBundle {
    state.forward(net, d, None).unwrap().1
}

fn map_tooth(d: &Dentition, idx: usize, f: impl Fn(&[Vec3]) -> Vec<Vec3>) -> Dentition {
    let teeth = d.teeth().enumerate().map(|(i, t)| {
        if i == idx {
            Tooth::new(t.label(), PointCloud::new(f(t.cloud().points())).unwrap()).unwrap()
        } else {
            t.clone()
        }
    });
    Dentition::new(teeth.collect::<Vec<_>>()).unwrap()
}

fn random_state(conditioned: bool) -> (Network, ModelState) {
    let (net, mut state) = ModelState::new(tiny_config(conditioned)).unwrap();
    // perturb the zero-initialized last layer so outputs depend on the input
    for (id, dim) in state.online.iter().map(|(id, p)| (id, p.value.dim())).collect::<Vec<_>>() {
        if state.online.name(id).starts_with("motion.2") {
            *state.online.get_mut(id) += &(random(dim.0, dim.1, 5) * 0.1);
        }
    }
    (net, state)
}

#[test]
fn point_permutation_leaves_every_feature_unchanged() {
    let (net, state) = random_state(false);
    let d = dyadic(1);
    let base = features(&net, &state, &d);
    let permuted = map_tooth(&d, 2, |p| p.iter().rev().copied().collect());
    assert_eq!(features(&net, &state, &permuted), base);
}

#[test]
fn translation_leaves_f_geo_unchanged_and_changes_f_pos() {
    let (net, state) = random_state(false);
    let d = dyadic(2);
    let shift = Vec3::new(3.0, -2.0, 1.0);
    let moved = map_tooth(&d, 1, |p| p.iter().map(|x| x + shift).collect());
    let (a, b) = (features(&net, &state, &d), features(&net, &state, &moved));
    assert_eq!(a.f_geo, b.f_geo);
    let l = d.labels().nth(1).unwrap();
    assert_ne!(a.f_pos[&l], b.f_pos[&l]);
    // the global max-pool only notices a tooth leaving the others' extent
    let far = map_tooth(&d, 1, |p| p.iter().map(|x| x + Vec3::new(0.0, 0.0, 16.0)).collect());
    assert_ne!(features(&net, &state, &far).f_global, a.f_global);
}

#[test]
fn global_encoder_ignores_tooth_order_and_duplicate_points() {
    let (net, state) = random_state(false);
    let input = CaseInput::new(&four_teeth(32, 3).initial).unwrap();
    let n = input.per_tooth;
    let eval = |points: &Array2<f64>, centers: &Array2<f64>| {
        let mut tape = Tape::new();
        let p = state.online.bind(&mut tape, false);
        let g = net.encode_global(&mut tape, &p, points, centers);
        tape.value(g).clone()
    };
    let base = eval(&input.points, &input.centers);
    let order = [2usize, 0, 3, 1];
    let rows: Vec<usize> = order.iter().flat_map(|&l| l * n..(l + 1) * n).collect();
    let permuted = eval(&input.points.select(Axis(0), &rows), &input.centers.select(Axis(0), &order));
    assert_eq!(base, permuted);

    // duplicate one 6-channel row directly at the shared MLP + pool
    let mut six = ndarray::concatenate(
        Axis(1),
        &[input.points.view(), input.centers.select(Axis(0), &(0..4 * n).map(|r| r / n).collect::<Vec<_>>()).view()],
    )
    .unwrap()
        * net.config.coord_scale;
    let pooled = |x: &Array2<f64>| {
        let mut tape = Tape::new();
        let p = state.online.bind(&mut tape, false);
        let v = tape.constant(x.clone());
        let g = net.global.forward(&mut tape, &p, v, x.nrows());
        tape.value(g).clone()
    };
    let once = pooled(&six);
    assert_eq!(once, base);
    let dup = six.row(17).to_owned();
    six.push_row(dup.view()).unwrap();
    assert_eq!(pooled(&six), once);
}

#[test]
fn propagation_is_permutation_equivariant_and_handles_one_token() {
    let (net, state) = random_state(false);
    let f = random(5, 8, 7);
    let g = random(5, 8, 8);
    let run = |a: &Array2<f64>, b: &Array2<f64>| {
        let mut tape = Tape::new();
        let p = state.online.bind(&mut tape, false);
        let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let (h1, h2) = net.propagate(&mut tape, &p, x, y);
        (tape.value(h1).clone(), tape.value(h2).clone())
    };
    let (h1, h2) = run(&f, &g);
    let order = [4usize, 2, 0, 1, 3];
    let (p1, p2) = run(&f.select(Axis(0), &order), &g.select(Axis(0), &order));
    for (i, &o) in order.iter().enumerate() {
        for k in 0..8 {
            assert!((p1[[i, k]] - h1[[o, k]]).abs() < 1e-12);
            assert!((p2[[i, k]] - h2[[o, k]]).abs() < 1e-12);
        }
    }
    let (s1, s2) = run(&f.slice(s![0..1, ..]).to_owned(), &g.slice(s![0..1, ..]).to_owned());
    assert!(s1.iter().chain(s2.iter()).all(|v| v.is_finite()));
}

#[test]
fn projection_shape_and_identical_rows() {
    let (net, state) = random_state(false);
    let mut tape = Tape::new();
    let p = state.online.bind(&mut tape, false);
    let glob = tape.constant(random(1, 16, 9));
    let row = random(1, 8, 10);
    let h = tape.constant(ndarray::concatenate(Axis(0), &[row.view(), row.view(), random(1, 8, 11).view()]).unwrap());
    let out = net.project(&mut tape, &p, glob, h, h);
    let v = tape.value(out);
    assert_eq!(v.dim(), (3, 8));
    assert_eq!(v.row(0), v.row(1));
}

#[test]
fn identity_initialization_reproduces_the_input() {
    let (net, state) = ModelState::new(tiny_config(false)).unwrap();
    let d = four_teeth(32, 4).initial;
    let (motions, _) = state.forward(&net, &d, None).unwrap();
    assert!(motions.keys().copied().eq(d.labels()));
    for m in motions.values() {
        assert_eq!(m.q, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.t, Vec3::zeros());
    }
    let moved = d.moved(&motions).unwrap();
    for (a, b) in moved.teeth().zip(d.teeth()) {
        for (p, q) in a.cloud().points().iter().zip(b.cloud().points()) {
            assert!((p - q).norm() < 1e-12);
        }
    }
}

#[test]
fn predicted_quaternions_are_unit_with_nonnegative_w() {
    for seed in 0..5 {
        let (net, mut state) = random_state(false);
        for (id, dim) in state.online.iter().map(|(id, p)| (id, p.value.dim())).collect::<Vec<_>>() {
            *state.online.get_mut(id) += &(random(dim.0, dim.1, 100 + seed) * 0.3);
        }
        let (motions, _) = state.forward(&net, &four_teeth(32, seed).initial, None).unwrap();
        for m in motions.values() {
            let n: f64 = m.q.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert!(m.q[0] >= 0.0);
        }
    }
}

#[test]
fn arch_embedding() {
    let (net, mut state) = random_state(true);
    let r = four_teeth(32, 5);
    let input = CaseInput::new(&r.initial).unwrap();
    let global = |state: &ModelState, x: &arrange_core::synthgen::ArchWidthVector| {
        let mut tape = Tape::new();
        let p = state.online.bind(&mut tape, false);
        let g = net.build(&mut tape, &p, &input, Some(x)).unwrap();
        let plain = net.encode_global(&mut tape, &p, &input.points, &input.centers);
        (tape.value(g.f_global).clone(), tape.value(plain).clone())
    };
    let (a, plain) = global(&state, &r.arch_width);
    let (b, _) = global(&state, &r.arch_width.with_offset(2.0, 2.0));
    assert_ne!(a, b);
    assert_ne!(a, plain);
    for (id, _) in state.online.clone().iter() {
        if state.online.name(id).starts_with("arch.") {
            state.online.get_mut(id).fill(0.0);
        }
    }
    let (zeroed, plain) = global(&state, &r.arch_width);
    assert_eq!(zeroed, plain);
    // conditioning mismatch is a configuration error
    assert!(matches!(state.forward(&net, &r.initial, None), Err(ModelError::Config(_))));
    let (vnet, vstate) = ModelState::new(tiny_config(false)).unwrap();
    assert!(matches!(vstate.forward(&vnet, &r.initial, Some(&r.arch_width)), Err(ModelError::Config(_))));
}

#[test]
fn ema_examples() {
    let (_, mut state) = random_state(false);
    state.ema_update(0.0).unwrap();
    for ((_, t), (_, o)) in state.target.iter().zip(state.online.iter()) {
        assert_eq!(t.value, o.value);
    }
    assert!(state.ema_update(1.0).is_err());
    assert!(state.ema_update(-0.1).is_err());

    for v in state.target.values_mut() {
        v.fill(0.0);
    }
    let locals = state.target.len();
    for v in state.online.values_mut().take(locals) {
        v.fill(1.0);
    }
    state.ema_update(0.99).unwrap();
    assert!(state.target.iter().all(|(_, p)| p.value.iter().all(|&x| (x - 0.01).abs() < 1e-15)));
    // geometric series: after k more steps θ_t = 1 − 0.99^(k+1)
    for k in 1..=300 {
        state.ema_update(0.99).unwrap();
        let want = 1.0 - 0.99f64.powi(k + 1);
        assert!(state.target.iter().all(|(_, p)| p.value.iter().all(|&x| (x - want).abs() < 1e-12)));
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (net, mut state) = random_state(true);
    state.ema_update(0.5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    state.save(&path).unwrap();
    let back = ModelState::load(&path).unwrap();
    assert_eq!(back, state);
    let r = four_teeth(32, 6);
    let a = state.forward(&net, &r.initial, Some(&r.arch_width)).unwrap();
    let b = back.forward(&back.network().unwrap(), &r.initial, Some(&r.arch_width)).unwrap();
    assert_eq!(a, b);

    let mut wrong = state.clone();
    wrong.config.feature_dim = 16;
    wrong.save(&path).unwrap();
    assert!(matches!(ModelState::load(&path), Err(ModelError::Shape(_))));
}

fn bundle_of(v: ndarray::ArrayView2<f64>, labels: &[ToothLabel]) -> BTreeMap<ToothLabel, Vec<f64>> {
    labels.iter().zip(v.rows()).map(|(l, r)| (*l, r.to_vec())).collect()
}

#[test]
fn taped_losses_match_plain_losses() {
    let (net, mut state) = random_state(false);
    for v in state.target.values_mut() {
        *v += &(random(v.nrows(), v.ncols(), 12) * 0.05);
    }
    let r = four_teeth(512, 7);
    let sampling = Sampling::new(&r.target, 32, 512).unwrap();
    let sample = make_sample(&r, &sampling, 3).unwrap();
    let weights = LossWeights::default();
    let grid = GridConfig::default();

    let mut tape = Tape::new();
    let online = state.online.bind(&mut tape, true);
    let target: Bound = state.target.bind(&mut tape, false);
    let g = net.build(&mut tape, &online, &sample.input, None).unwrap();
    let lv = case_loss_graph(&mut tape, &net, &target, &g, &sample.input, &sample.targets, &weights, grid).unwrap();
    let comps = lv.components(&tape);
    let motions = arrange_model::network::motions_from_graph(&tape, &g, &sample.input).unwrap();

    let net_initial = sampling.network_view(&r.initial).unwrap();
    let net_target = sampling.network_view(&r.target).unwrap();
    let l_r = reconstruct_loss(&net_initial.moved(&motions).unwrap(), &net_target, false).unwrap();
    assert!((comps.l_r - l_r).abs() < 1e-12, "{} vs {l_r}", comps.l_r);

    let gt: BTreeMap<_, RigidMotion> = r.gt_motions.clone();
    assert!((comps.l_p - parameter_loss(&motions, &gt).unwrap()).abs() < 1e-12);

    let dense = sampling.collision_view(&r.initial).unwrap();
    let l_c = dentition_collision_loss(&dense, &motions, grid).unwrap().loss;
    assert!((comps.l_c - l_c).abs() < 1e-9, "{} vs {l_c}", comps.l_c);

    let labels = &sample.input.labels;
    let mut t2 = Tape::new();
    let tb = state.target.bind(&mut t2, false);
    let (gp, pp) = net.encode_local(&mut t2, &tb, &sample.targets.points, &sample.targets.centers);
    let (gn, pn) = net.encode_local(&mut t2, &tb, &sample.targets.negatives.0, &sample.targets.negatives.1);
    let batch = ConsistencyBatch {
        f_geo: bundle_of(tape.value(g.f_geo).view(), labels),
        f_proj: bundle_of(tape.value(g.f_proj).view(), labels),
        geo_positive: bundle_of(t2.value(gp).view(), labels),
        geo_negative: bundle_of(t2.value(gn).view(), labels),
        pos_positive: bundle_of(t2.value(pp).view(), labels),
        pos_negative: bundle_of(t2.value(pn).view(), labels),
    };
    assert!((comps.l_f - consistency_loss(&batch).unwrap()).abs() < 1e-12);

    let total = arrange_model::losses::total_loss(&comps, &weights).unwrap();
    assert!((tape.scalar(lv.total) - total).abs() < 1e-9);

    // the frozen target encoders receive no gradient
    let grads = tape.backward(lv.total);
    assert!(target.vars().iter().all(|v| grads.get(*v).is_none()));
    assert!(online.vars().iter().any(|v| grads.get(*v).is_some()));
}

#[test]
fn unequal_point_counts_are_a_shape_error() {
    let r = four_teeth(32, 8);
    let teeth: Vec<Tooth> = r
        .initial
        .teeth()
        .enumerate()
        .map(|(i, t)| if i == 0 { Tooth::new(t.label(), t.cloud().select(&[0, 1, 2])).unwrap() } else { t.clone() })
        .collect();
    let d = Dentition::new(teeth).unwrap();
    assert!(matches!(CaseInput::new(&d), Err(ModelError::Shape(_))));
    let (net, state) = random_state(false);
    let wrong_n = four_teeth(16, 8).initial;
    assert!(matches!(state.forward(&net, &wrong_n, None), Err(ModelError::Shape(_))));
}
