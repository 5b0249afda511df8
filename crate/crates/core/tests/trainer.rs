mod common;

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relight_core::loss::FeatureExtractor;
use relight_core::model::archive::Archive;
use relight_core::model::RelightModel;
use relight_core::train::{
    evaluate, fit, read_metrics, sample_batch, split_scenes, train_step, Adam, FitOptions, TrainingCheckpoint,
    BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_LOG,
};
use relight_core::Error;

use common::*;

#[test]
fn single_scene_two_ids_support() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = toy_data(dir.path(), 1, 2);
    let scenes = vec!["scene_000".to_string()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut seen = BTreeSet::new();
    for _ in 0..64 {
        let s = sample_batch(&mut data, &scenes, &mut rng).unwrap();
        assert!(s.source_id < 2 && s.target_id < 2);
        seen.insert((s.source_id, s.target_id));
    }
    assert_eq!(seen.len(), 4);
    assert!(matches!(sample_batch(&mut data, &[], &mut rng), Err(Error::Empty(_))));
}

#[test]
fn sampling_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = toy_data(dir.path(), 3, 3);
    let scenes = data.manifest().scene_ids();
    let draw = |data: &mut relight_core::train::TrainingData| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..30)
            .map(|_| {
                let s = sample_batch(data, &scenes, &mut rng).unwrap();
                (s.scene, s.source_id, s.target_id)
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(&mut data), draw(&mut data));
}

#[test]
fn scene_target_cells_pass_chi_square() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = toy_data(dir.path(), 4, 4);
    let scenes = data.manifest().scene_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut counts: BTreeMap<(String, u32), usize> = BTreeMap::new();
    let n = 10_000;
    for _ in 0..n {
        let s = sample_batch(&mut data, &scenes, &mut rng).unwrap();
        *counts.entry((s.scene, s.target_id)).or_default() += 1;
    }
    assert_eq!(counts.len(), 16);
    let expected = n as f64 / 16.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // upper 1% point of chi-square with 15 degrees of freedom
    assert!(chi2 < 30.578, "chi2 = {chi2}");
}

#[test]
fn split_is_scene_disjoint() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = toy(dir.path(), 10, 2);
    let s = split_scenes(&m, 0.1, 4).unwrap();
    assert_eq!(s.validation.len(), 1);
    assert_eq!(s.train.len(), 9);
    assert!(s.train.iter().all(|t| !s.validation.contains(t)));
    let s = split_scenes(&m, 0.25, 4).unwrap();
    assert_eq!(s.validation.len(), 3);
}

#[test]
fn fifty_steps_halve_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = toy_data(dir.path(), 1, 2);
    let sample = data.sample("scene_000", 0, 1).unwrap();
    let setup = tiny_setup(1, 1);
    let extractor = FeatureExtractor::new(&setup.extractor, DType::F32).unwrap();
    let mut model = RelightModel::init(setup.model.clone(), 5, DType::F32).unwrap();
    let mut opt = Adam::new(model.params()).unwrap();
    let batch = std::slice::from_ref(&sample);
    let first = train_step(&mut model, &mut opt, &extractor, batch, 2e-3).unwrap();
    for _ in 1..50 {
        train_step(&mut model, &mut opt, &extractor, batch, 2e-3).unwrap();
    }
    let last = evaluate(&model, &extractor, batch).unwrap();
    assert!(last.total <= 0.5 * first.total, "{} -> {}", first.total, last.total);
    assert_eq!(model.train_steps, 50);
}

#[test]
fn zero_lr_leaves_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = toy_data(dir.path(), 1, 2);
    let sample = data.sample("scene_000", 1, 0).unwrap();
    let setup = tiny_setup(1, 1);
    let extractor = FeatureExtractor::new(&setup.extractor, DType::F32).unwrap();
    let mut model = RelightModel::init(setup.model.clone(), 5, DType::F32).unwrap();
    let before = flat_params(model.params());
    let mut opt = Adam::new(model.params()).unwrap();
    for _ in 0..3 {
        train_step(&mut model, &mut opt, &extractor, std::slice::from_ref(&sample), 0.0).unwrap();
    }
    assert_eq!(flat_params(model.params()), before);
}

#[test]
fn non_finite_loss_names_the_term() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = toy_data(dir.path(), 1, 2);
    let sample = data.sample("scene_000", 0, 0).unwrap();
    let setup = tiny_setup(1, 1);
    let extractor = FeatureExtractor::new(&setup.extractor, DType::F32).unwrap();
    let mut model = RelightModel::init(setup.model.clone(), 5, DType::F32).unwrap();
    let var = model.params().get("probe_dec.out.bias").unwrap();
    var.set(&Tensor::full(f32::NAN, var.dims(), var.device()).unwrap()).unwrap();
    let mut opt = Adam::new(model.params()).unwrap();
    let err = train_step(&mut model, &mut opt, &extractor, std::slice::from_ref(&sample), 1e-3).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { term: "probe", .. }), "{err}");
}

#[test]
fn zero_epochs_returns_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut data = toy_data(dir.path(), 4, 2);
    let setup = tiny_setup(0, 4);
    let res = fit(
        &mut data,
        &setup,
        &FitOptions {
            out_dir: Some(out.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(res.metrics.is_empty());
    let fresh = RelightModel::init(setup.model.clone(), setup.train.seed, DType::F32).unwrap();
    assert_eq!(flat_params(res.model.params()), flat_params(fresh.params()));
    assert_eq!(std::fs::read_to_string(out.path().join(METRICS_LOG)).unwrap(), "");
}

#[test]
fn seeded_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let setup = tiny_setup(2, 6);
    let run = || {
        let mut data = toy_data(dir.path(), 4, 2);
        fit(&mut data, &setup, &FitOptions::default()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(flat_params(a.model.params()), flat_params(b.model.params()));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full_dir = tempfile::tempdir().unwrap();
    let part_dir = tempfile::tempdir().unwrap();
    let setup = tiny_setup(4, 6);
    let mut data = toy_data(dir.path(), 4, 2);
    let full = fit(
        &mut data,
        &setup,
        &FitOptions {
            out_dir: Some(full_dir.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();
    let first = fit(
        &mut data,
        &setup,
        &FitOptions {
            out_dir: Some(part_dir.path().to_path_buf()),
            stop_after: Some(2),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(first.metrics.len(), 2);
    let rest = fit(
        &mut data,
        &setup,
        &FitOptions {
            out_dir: Some(part_dir.path().to_path_buf()),
            resume: Some(part_dir.path().join(LAST_CHECKPOINT)),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(rest.metrics, full.metrics[2..].to_vec());
    assert_eq!(flat_params(rest.model.params()), flat_params(full.model.params()));
    assert_eq!(
        read_metrics(part_dir.path().join(METRICS_LOG)).unwrap(),
        read_metrics(full_dir.path().join(METRICS_LOG)).unwrap()
    );
}

#[test]
fn log_records_and_best_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut setup = tiny_setup(5, 4);
    setup.train.lr = 5e-3;
    let mut data = toy_data(dir.path(), 4, 2);
    let res = fit(
        &mut data,
        &setup,
        &FitOptions {
            out_dir: Some(out.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();
    let log = read_metrics(out.path().join(METRICS_LOG)).unwrap();
    assert_eq!(log, res.metrics);
    for (k, r) in log.iter().enumerate() {
        assert_eq!(r.epoch, k);
        assert_eq!(r.step, 4 * (k as u64 + 1));
        for v in [r.probe, r.image_l1, r.perceptual, r.total, r.lr, r.val_total] {
            assert!(v.is_finite());
        }
    }
    let min = log.iter().map(|r| r.val_total).fold(f64::INFINITY, f64::min);
    let best = Archive::read(out.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(best.metadata["val_total"].as_f64().unwrap(), min);
    assert_eq!(res.best_val, Some(min));

    // the logged lr is the scheduler's rate during that epoch
    let ckpt = TrainingCheckpoint::load(out.path().join(LAST_CHECKPOINT)).unwrap();
    let mut sched = relight_core::train::PlateauScheduler::new(&setup.train);
    for r in &log {
        assert_eq!(r.lr, sched.lr);
        sched.step(r.val_total);
    }
    assert_eq!(ckpt.scheduler, sched);
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let setup = tiny_setup(1, 3);
    let mut data = toy_data(dir.path(), 4, 2);
    let res = fit(
        &mut data,
        &setup,
        &FitOptions {
            out_dir: Some(out.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();
    let path = out.path().join(LAST_CHECKPOINT);
    let ckpt = TrainingCheckpoint::load(&path).unwrap();
    assert_eq!(flat_params(ckpt.model.params()), flat_params(res.model.params()));
    assert_eq!(ckpt.model.train_steps, 3);
    let plain = RelightModel::load(&path).unwrap();
    assert_eq!(flat_params(plain.params()), flat_params(res.model.params()));

    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n / 3] ^= 1;
    let bad = out.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(TrainingCheckpoint::load(&bad), Err(Error::CorruptCheckpoint(_))));
    bytes[n / 3] ^= 1;
    bytes[8] = 2;
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(RelightModel::load(&bad), Err(Error::VersionMismatch { found: 2, .. })));
}
