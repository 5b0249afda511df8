use candle_core::DType;
use relight_core::image::Image;
use relight_core::model::{ModelConfig, RelightModel};

/// Weights plus optional bias of a k×k convolution.
fn conv(c_in: usize, c_out: usize, k: usize, bias: bool) -> usize {
    c_in * c_out * k * k + if bias { c_out } else { 0 }
}

/// Layer-by-layer parameter arithmetic, written from the architecture
/// description rather than from the model code.
fn expected_count(c: &ModelConfig) -> usize {
    let ch = |level: usize| {
        if level >= c.stages {
            c.bottleneck_channels
        } else {
            (c.base_channels << level).min(c.bottleneck_channels)
        }
    };
    // encoder blocks are instance-normalized and carry no bias
    let dual_in = |a, b| conv(a, b, 3, false) + conv(b, b, 3, false);
    let dual_plain = |a, b| conv(a, b, 3, true) + conv(b, b, 3, true);
    let mut n = dual_in(3, ch(0));
    for l in 0..c.stages {
        let (a, b) = (ch(l), ch(l + 1));
        n += 3 * conv(a, b, 4, false);
        if l + 1 < c.stages {
            n += dual_in(b, b);
        }
    }
    let b = c.bottleneck_channels;
    n += conv(b, b, 1, true);
    n += c.res_blocks * 2 * conv(b, b, 3, true);
    for l in 0..c.stages {
        let (hi, lo) = (ch(l + 1), ch(l));
        // two upsamplers hi → lo and the back-projecting downsampler lo → hi
        n += 2 * conv(hi, lo, 4, true) + conv(lo, hi, 4, true);
        n += dual_plain(2 * lo, lo);
    }
    n += conv(ch(0), 3, 1, true);

    // probe branch: 4×4 seed, then ×2 upsamplers halving channels (floor 8)
    let mut plan = vec![c.lighting_channels.min(64)];
    let mut side = 4;
    while side < c.probe_size {
        plan.push((plan.last().unwrap() / 2).max(8));
        side *= 2;
    }
    n += conv(c.lighting_channels, plan[0], 4, true);
    for w in plan.windows(2) {
        n += conv(w[0], w[1], 4, true);
    }
    n += conv(*plan.last().unwrap(), 3, 3, true);
    // probe encoder mirrors the decoder with normalized downsamplers
    let mut rev = plan.clone();
    rev.reverse();
    let mut c_in = 3;
    for &co in rev.iter().skip(1) {
        n += conv(c_in, co, 4, false);
        c_in = co;
    }
    n += conv(c_in, c.lighting_channels, 3, true);
    n
}

#[test]
fn default_parameter_count_matches_layer_arithmetic() {
    let config = ModelConfig::default();
    let model = RelightModel::init(config, 0, DType::F32).unwrap();
    assert_eq!(model.parameter_count(), expected_count(&config));
}

#[test]
fn parameter_count_oracle_over_configs() {
    for (base, stages, bottleneck, d, res, probe) in
        [(4, 2, 16, 4, 1, 8), (8, 3, 48, 16, 2, 32), (16, 4, 64, 32, 0, 16), (32, 1, 40, 8, 3, 64)]
    {
        let config = ModelConfig {
            input_size: 64,
            base_channels: base,
            stages,
            bottleneck_channels: bottleneck,
            lighting_channels: d,
            res_blocks: res,
            probe_size: probe,
        };
        let model = RelightModel::init(config, 1, DType::F32).unwrap();
        assert_eq!(model.parameter_count(), expected_count(&config), "{config:?}");
    }
}

#[test]
fn default_shapes_and_degenerate_input() {
    let config = ModelConfig::default();
    let model = RelightModel::init(config, 0, DType::F32).unwrap();
    let (enc, code) = model.encode(&Image::filled(256, 256, 0.0)).unwrap();
    assert_eq!(enc.geometry.dims(), &[1, 128, 16, 16]);
    assert_eq!(code.dim(), 128);
    assert!(code.values.iter().all(|v| v.is_finite()));
    let (_, again) = model.encode(&Image::filled(256, 256, 0.0)).unwrap();
    assert_eq!(code, again);
}

#[test]
fn two_stage_bottleneck_side() {
    let config = ModelConfig {
        stages: 2,
        ..ModelConfig::default()
    };
    assert_eq!(config.bottleneck_side(), 64);
}

#[test]
fn same_seed_gives_identical_parameters() {
    let config = ModelConfig {
        input_size: 32,
        base_channels: 4,
        stages: 2,
        bottleneck_channels: 16,
        lighting_channels: 4,
        res_blocks: 1,
        probe_size: 8,
    };
    let a = RelightModel::init(config, 42, DType::F32).unwrap().params().export().unwrap();
    let b = RelightModel::init(config, 42, DType::F32).unwrap().params().export().unwrap();
    let c = RelightModel::init(config, 43, DType::F32).unwrap().params().export().unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
