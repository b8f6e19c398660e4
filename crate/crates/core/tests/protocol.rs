//! Fold assignment, early stopping, optimizer and cross-validation runs.

use std::collections::BTreeSet;

use chrono::NaiveDate;
use proptest::prelude::*;
use ptvseg::cvharness::*;
use ptvseg::metrics::{evaluate_pair, MetricOptions};
use ptvseg::phantom::{generate_dataset, PhantomSpec};
use ptvseg::trainer::*;
use ptvseg::unet::{build_unet, UNetConfig, UNetModel};
use ptvseg::{LossKind, Tensor};

fn dated(n: usize, shuffle: u64) -> Vec<(NaiveDate, String)> {
    let d0 = NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();
    (0..n)
        .map(|i| {
            let day = (i as u64 * 7919 + shuffle) % (n as u64 / 2 + 1);
            (d0 + chrono::Days::new(day), format!("P{i:04}"))
        })
        .collect()
}

proptest! {
    #[test]
    fn folds_are_balanced_and_stratified(n in 3usize..120, k in 3usize..8, shuffle in any::<u64>()) {
        prop_assume!(n >= k);
        let pts = dated(n, shuffle);
        let refs: Vec<_> = pts.iter().map(|(d, s)| (*d, s.as_str())).collect();
        let plan = assign_folds_by_date(&refs, k).unwrap();
        prop_assert_eq!(plan.assignments.len(), n);
        for f in 0..k {
            let size = plan.members(f).len();
            prop_assert!(size == n / k || size == n.div_ceil(k));
        }
        // Each block of k consecutive (date, id) ranks covers every fold once.
        let mut order = refs.clone();
        order.sort();
        for block in order.chunks_exact(k) {
            let folds: BTreeSet<usize> = block.iter().map(|(_, id)| plan.fold_of(id).unwrap()).collect();
            prop_assert_eq!(folds.len(), k);
        }
        // Test folds over rotations partition the patients.
        let mut seen = BTreeSet::new();
        for rot in &plan.rotations {
            for id in plan.members(rot.test_fold) {
                prop_assert!(seen.insert(id.to_string()));
            }
        }
        prop_assert_eq!(seen.len(), n);
    }

    #[test]
    fn best_loss_tracks_running_minimum(losses in prop::collection::vec(0.01f64..10.0, 1..60)) {
        let config = TrainConfig::default();
        let model = build_unet(UNetConfig { base_channels: 1, depth: 1, ..UNetConfig::default() }, 0).unwrap();
        let mut state = TrainState::new(model, &config);
        let mut since = 0usize;
        let mut best = f64::INFINITY;
        for (i, &l) in losses.iter().enumerate() {
            state.epoch = i + 1;
            state.record_validation(l, config.min_delta);
            if i > 0 {
                if l < best * (1.0 - config.min_delta) { since = 0 } else { since += 1 }
            }
            best = best.min(l);
            prop_assert_eq!(state.best_val_loss, Some(best));
            prop_assert_eq!(state.epochs_since_improvement, since);
        }
    }
}

#[test]
fn early_stop_on_flat_validation_is_best_plus_patience() {
    for best_epoch in [1usize, 4, 17] {
        let config = TrainConfig::default();
        let model = build_unet(
            UNetConfig {
                base_channels: 1,
                depth: 1,
                ..UNetConfig::default()
            },
            0,
        )
        .unwrap();
        let mut state = TrainState::new(model, &config);
        let mut stopped_at = None;
        for epoch in 1..=100 {
            state.epoch = epoch;
            let loss = if epoch < best_epoch {
                2.0 - epoch as f64 * 0.01
            } else {
                0.5
            };
            state.record_validation(loss, config.min_delta);
            if should_stop(&state, &config) {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(best_epoch + config.patience));
        assert_eq!(state.best_epoch, best_epoch);
    }
}

#[test]
fn adam_matches_hand_rolled_reference() {
    let hp = AdamHyper::default();
    let mut params = vec![0.5, -1.0, 2.0];
    let mut moments = AdamMoments::zeros(3);
    let (mut p_ref, mut m_ref, mut v_ref) = (params.clone(), [0.0; 3], [0.0; 3]);
    for t in 1..=5 {
        let grads: Vec<f64> = params.iter().map(|p| 2.0 * p - 0.3 * t as f64).collect();
        adam_step(&mut params, &grads, &mut moments, 0.01, hp);
        for i in 0..3 {
            let g = 2.0 * p_ref[i] - 0.3 * t as f64;
            m_ref[i] = 0.9 * m_ref[i] + 0.1 * g;
            v_ref[i] = 0.999 * v_ref[i] + 0.001 * g * g;
            let mh = m_ref[i] / (1.0 - 0.9f64.powi(t));
            let vh = v_ref[i] / (1.0 - 0.999f64.powi(t));
            p_ref[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert_eq!(params, p_ref);
    }
}

fn tiny_dataset(n: usize) -> Vec<ptvseg::dataprep::PatientRecord> {
    generate_dataset(&PhantomSpec {
        seed: 5,
        n_patients: n,
        min_slices: 2,
        max_slices: 3,
        size: 16,
        ..PhantomSpec::default()
    })
    .unwrap()
}

fn tiny_model() -> UNetConfig {
    UNetConfig {
        base_channels: 2,
        depth: 1,
        ..UNetConfig::default()
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 3,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn cross_validation_partitions_and_reproduces() {
    let data = tiny_dataset(10);
    let plan = assign_folds(&data, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = CvOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..CvOptions::default()
    };
    let run = run_cross_validation(&data, &plan, tiny_model(), &tiny_train(), &opts).unwrap();
    assert!(run.failures().is_empty());
    let rows = run.rows();
    assert_eq!(rows.len(), 10);
    let ids: BTreeSet<_> = rows.iter().map(|r| r.patient_id.clone()).collect();
    assert_eq!(ids.len(), 10);
    for res in run.rotations.iter().map(|r| r.as_ref().unwrap()) {
        let (a, b, c): (BTreeSet<_>, BTreeSet<_>, BTreeSet<_>) = (
            res.train_ids.iter().collect(),
            res.val_ids.iter().collect(),
            res.test_ids.iter().collect(),
        );
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!(a.len() + b.len() + c.len(), 10);
        let rd = dir.path().join(format!("rotation_{}", res.rotation));
        for f in ["checkpoint.bin", "epochs.csv", "metrics.csv"] {
            assert!(rd.join(f).is_file(), "{f}");
        }
    }
    let merged = ptvseg::report::read_metrics_csv(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(merged.len(), 10);

    let again = run_cross_validation(&data, &plan, tiny_model(), &tiny_train(), &CvOptions::default()).unwrap();
    assert_eq!(again.rows(), rows);
    let parallel = run_cross_validation(
        &data,
        &plan,
        tiny_model(),
        &tiny_train(),
        &CvOptions {
            jobs: 2,
            ..CvOptions::default()
        },
    )
    .unwrap();
    assert_eq!(parallel.rows(), rows);
}

#[test]
fn rotation_matches_manual_composition() {
    let data = tiny_dataset(6);
    let plan = assign_folds(&data, 3).unwrap();
    let harness = run_rotation(&data, &plan, 1, tiny_model(), &tiny_train(), &CvOptions::default()).unwrap();

    // Same rotation by hand: fold 1 tests, fold 2 validates, fold 0 trains.
    let pick = |f: usize| -> Vec<_> { data.iter().filter(|p| plan.fold_of(&p.patient_id) == Some(f)).collect() };
    let samples =
        |ps: &[&ptvseg::dataprep::PatientRecord]| -> Vec<Sample> { ps.iter().flat_map(|p| p.samples()).collect() };
    let config = TrainConfig {
        seed: tiny_train().seed + 1,
        ..tiny_train()
    };
    let model = build_unet(tiny_model(), config.seed).unwrap();
    let out = fit(model, &samples(&pick(0)), &samples(&pick(2)), &config, |_| {}).unwrap();
    for (row, p) in harness.rows.iter().zip(pick(1)) {
        let pred = predict_patient(&out.best_model, p, 0.5).unwrap();
        let m = evaluate_pair(&p.mask, &pred, MetricOptions::default()).unwrap();
        assert_eq!(row.patient_id, p.patient_id);
        assert_eq!(row.dsc, m.dsc);
        assert_eq!(row.hd95_mm, m.hd95_mm);
        assert_eq!(row.hd_mm, m.hd_mm);
    }
}

#[test]
fn zero_model_predicts_everything() {
    let data = tiny_dataset(1);
    let mut model = build_unet(tiny_model(), 0).unwrap();
    for l in &mut model.layers {
        *l = l.zeros_like();
    }
    let v = predict_patient(&model, &data[0], 0.5).unwrap();
    assert_eq!(v.count(), v.voxels().len());
}

/// Depth-1 width-1 network that passes the input straight through the skip
/// path and thresholds it at 0.5.
fn pass_through_model() -> UNetModel {
    let mut m = build_unet(
        UNetConfig {
            base_channels: 1,
            depth: 1,
            ..UNetConfig::default()
        },
        0,
    )
    .unwrap();
    for l in &mut m.layers {
        *l = l.zeros_like();
    }
    let centre = |l: &mut ptvseg::tensor::ConvKernel, c_in: usize, which: usize| {
        l.weights.data_mut()[which * 9 + 4] = 1.0;
        assert_eq!(l.c_in(), c_in);
    };
    centre(&mut m.layers[0], 1, 0);
    centre(&mut m.layers[1], 1, 0);
    centre(&mut m.layers[5], 2, 1);
    centre(&mut m.layers[6], 1, 0);
    m.layers[7].weights = Tensor::full(&[1, 1, 1, 1], 100.0);
    m.layers[7].bias = Tensor::full(&[1], -50.0);
    m
}

#[test]
fn slice_order_is_preserved() {
    let mut p = tiny_dataset(1).remove(0);
    let marker = 1;
    for (z, s) in p.slices.iter_mut().enumerate() {
        s.hu.fill(if z == marker { 240 } else { -160 });
    }
    let v = predict_patient(&pass_through_model(), &p, 0.5).unwrap();
    for z in 0..p.slices.len() {
        let on = v.slice(z).iter().filter(|&&b| b).count();
        assert_eq!(on, if z == marker { 16 * 16 } else { 0 }, "slice {z}");
    }
    assert_eq!(v.spacing_mm(), p.spacing_mm);
}

#[test]
fn training_is_deterministic_and_loss_kinds_differ() {
    let data = tiny_dataset(3);
    let s: Vec<Sample> = data.iter().flat_map(|p| p.samples()).collect();
    let run = |loss| {
        let cfg = TrainConfig { loss, ..tiny_train() };
        fit(build_unet(tiny_model(), 1).unwrap(), &s, &s, &cfg, |_| {}).unwrap()
    };
    let (a, b) = (run(LossKind::Bce), run(LossKind::Bce));
    assert_eq!(a.final_model, b.final_model);
    assert_eq!(a.history, b.history);
    assert_ne!(run(LossKind::Dice).final_model, a.final_model);
}

#[test]
fn planning_errors() {
    let data = tiny_dataset(4);
    assert!(matches!(
        assign_folds(&data, 5),
        Err(CvError::TooFewPatients { n: 4, k: 5 })
    ));
    assert!(matches!(assign_folds(&data, 2), Err(CvError::TooFewFolds(2))));
}
