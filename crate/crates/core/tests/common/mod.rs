#![allow(dead_code)]

pub mod oracles;

use std::path::Path;

use relight_core::loss::FeatureExtractorSpec;
use relight_core::manifest::DatasetManifest;
use relight_core::model::ModelConfig;
use relight_core::probe::ProbeSet;
use relight_core::synth::{build_toy_dataset, default_light_specs};
use relight_core::train::{TrainConfig, TrainingData, TrainingSetup};

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        base_channels: 4,
        stages: 2,
        bottleneck_channels: 16,
        lighting_channels: 4,
        res_blocks: 1,
        probe_size: 8,
    }
}

pub fn tiny_setup(epochs: usize, samples: usize) -> TrainingSetup {
    TrainingSetup {
        model: tiny_model(),
        train: TrainConfig {
            epochs,
            samples_per_epoch: samples,
            lr: 1e-3,
            image_size: 32,
            seed: 3,
            validation_fraction: 0.25,
            validation_samples: 4,
            plateau_patience: 1,
            ..TrainConfig::default()
        },
        extractor: FeatureExtractorSpec::frozen_random(1, 2),
    }
}

pub fn toy(dir: &Path, scenes: usize, ids: usize) -> (DatasetManifest, ProbeSet) {
    let manifest = build_toy_dataset(scenes, 32, &default_light_specs(ids, 8), dir, 11).unwrap();
    let probes = ProbeSet::load_dir(dir.join("probes")).unwrap();
    (manifest, probes)
}

pub fn toy_data(dir: &Path, scenes: usize, ids: usize) -> TrainingData {
    let (m, p) = toy(dir, scenes, ids);
    TrainingData::new(m, p, 32, true).unwrap()
}

pub fn flat_params(store: &relight_core::model::params::ParamStore) -> Vec<(String, Vec<f32>)> {
    store
        .export()
        .unwrap()
        .into_iter()
        .map(|(k, (_, v))| (k, v))
        .collect()
}
