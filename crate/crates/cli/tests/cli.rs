use std::path::Path;
use std::process::{Command, Output};

fn relight_aug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relight-aug")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = relight_aug(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn count_png(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count()
}

#[test]
fn toy_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("toy");
    ok(&["synth-data", "--scenes", "3", "--lights", "2", "--size", "32", "--probe-size", "16", "--out", s(&data)]);
    assert!(data.join("manifest.json").exists());

    let config = root.join("train.json");
    std::fs::write(
        &config,
        r#"{
            "model": {"input_size": 32, "base_channels": 4, "stages": 2, "bottleneck_channels": 16,
                      "lighting_channels": 4, "res_blocks": 1, "probe_size": 16},
            "train": {"epochs": 1, "samples_per_epoch": 2, "image_size": 32, "seed": 1, "validation_samples": 2},
            "extractor": {"kind": "frozen-random", "seed": 1, "layer_count": 2}
        }"#,
    )
    .unwrap();
    let run = root.join("run");
    ok(&[
        "train",
        "--manifest",
        s(&data.join("manifest.json")),
        "--probes",
        s(&data.join("probes")),
        "--config",
        s(&config),
        "--out",
        s(&run),
    ]);
    for f in ["last.ckpt", "best.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let spec = root.join("specs.json");
    std::fs::write(
        &spec,
        r#"[{"azimuth_deg": -60, "elevation_deg": 10, "size": 16},
            {"azimuth_deg": 60, "elevation_deg": 10, "size": 16}]"#,
    )
    .unwrap();
    let probes = root.join("probes");
    ok(&["render-probes", "--spec", s(&spec), "--out", s(&probes)]);
    assert!(probes.join("probe_1.png").exists() && probes.join("probe_1.json").exists());

    let images = data.join("images").join("scene_000");
    let relit = root.join("relit");
    let ckpt = run.join("last.ckpt");
    let augment = ["augment", "--ckpt", s(&ckpt), "--images", s(&images), "--probes", s(&probes), "--out", s(&relit)];
    ok(&augment);
    assert_eq!(count_png(&relit), 4);
    assert!(relit.join("pool.json").exists());
    assert!(!relight_aug(&augment).status.success());
    let mut again = augment.to_vec();
    again.push("--overwrite");
    ok(&again);

    let pairs = root.join("pairs");
    ok(&["make-pairs", "--images", s(&images), "--out", s(&pairs), "--seed", "3", "--strength", "0.5"]);
    for task in ["mma", "homography", "pr"] {
        let report = root.join(format!("{task}.json"));
        ok(&["eval", task, "--pairs", s(&pairs.join("pairs.json")), "--report", s(&report)]);
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(json["per_pair"].as_array().unwrap().len(), 2, "{task}");
        assert!(json["aggregate"].is_object(), "{task}");
    }
}

#[test]
fn vae_train_and_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = root.join("spec.json");
    std::fs::write(&spec, r#"{"azimuth_deg": 30, "elevation_deg": 20, "size": 16}"#).unwrap();
    let probes = root.join("probes");
    ok(&["render-probes", "--spec", s(&spec), "--out", s(&probes)]);
    let config = root.join("vae.json");
    std::fs::write(
        &config,
        r#"{"latent_dim": 3, "probe_size": 16, "epochs": 1, "batch_size": 4, "synthetic_probes": 4, "base_channels": 4}"#,
    )
    .unwrap();
    let ckpt = root.join("vae.ckpt");
    ok(&["train-vae", "--probes", s(&probes), "--config", s(&config), "--out", s(&ckpt)]);

    let a = root.join("a.png");
    let b = root.join("b.png");
    ok(&["sample-probe", "--ckpt", s(&ckpt), "--z", "0,-1,0.5", "--out", s(&a)]);
    ok(&["sample-probe", "--ckpt", s(&ckpt), "--z", "0,-1,0.5", "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let wrong = relight_aug(&["sample-probe", "--ckpt", s(&ckpt), "--z", "0,1", "--out", s(&a)]);
    assert!(!wrong.status.success());
    assert!(String::from_utf8_lossy(&wrong.stderr).starts_with("error:"));
}

#[test]
fn averaging_reports_missing_scene_probes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("toy");
    ok(&["synth-data", "--scenes", "2", "--lights", "2", "--size", "32", "--probe-size", "16", "--out", s(&data)]);
    let out = relight_aug(&["avg-probes", "--manifest", s(&data.join("manifest.json")), "--out", s(&tmp.path().join("avg"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("scene_000"));
}
