use std::path::Path;
use std::process::Command;

use serde_json::json;

use vitbind::io::{add_image, write_labels, Architecture, ArchiveBuilder, ImageRecord, LabelRaster, ModelBundle, NormPlacement};
use vitbind::tensor::DenseTensor;
use vitbind_cli::{run, ExperimentConfig, Manifest};

fn vitbind(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vitbind"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, v: serde_json::Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

/// Random two-block model with 8x8 patches of 2x2 pixels, and eight labelled images.
fn model_fixture(dir: &Path) -> serde_json::Value {
    let mut arch = Architecture::tiny(2, 16, 2, 8, NormPlacement::Pre);
    arch.patch_size = 2;
    let bundle = ModelBundle::random_init(arch, 3).unwrap();
    bundle.save(dir.join("model.vbt")).unwrap();
    let mut images = ArchiveBuilder::new();
    let mut rasters = Vec::new();
    for i in 0..8u32 {
        let pixels = DenseTensor::from_fn(vec![3, 16, 16], |ix| {
            let v = (ix * 37 + i as usize * 101) % 97;
            v as f32 / 97.0 - 0.5
        });
        add_image(&mut images, &ImageRecord { id: format!("img{i}"), pixels }).unwrap();
        let instance: Vec<i32> = (0..64).map(|p| (p % 8) / 4 + 2 * ((p / 8) / 4)).collect();
        let class = instance.iter().map(|&o| (o + i as i32) % 3).collect();
        rasters.push(LabelRaster::new(format!("img{i}"), 8, instance, class).unwrap());
    }
    images.write(dir.join("images.vbt")).unwrap();
    write_labels(dir.join("labels.vbt"), &rasters).unwrap();
    json!({
        "bundle": dir.join("model.vbt"),
        "images": dir.join("images.vbt"),
        "labels": dir.join("labels.vbt"),
        "recipe": {"k": 4, "epochs": 3, "batch_size": 2, "lr": 0.01},
        "analysis": {"images": 4, "permutations": 199},
        "seed": 5
    })
}

fn synthetic_config() -> serde_json::Value {
    json!({
        "synthetic": {"images": 24},
        "families": ["quad"],
        "stages": ["synth", "probe-train", "pca"],
        "seed": 11
    })
}

#[test]
fn empty_stage_list_writes_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = run(&ExperimentConfig::default(), dir.path()).unwrap();
    assert!(m.complete);
    assert!(m.files.is_empty() && m.stages.is_empty());
    assert_eq!(Manifest::load(dir.path()).unwrap(), m);
}

#[test]
fn synthetic_runs_are_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", synthetic_config());
    let mut manifests = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let out = dir.path().join(name);
        let o = vitbind(&["--config", &cfg, "--threads", threads, "--out", out.to_str().unwrap(), "run"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        manifests.push(Manifest::load(&out).unwrap());
    }
    let m = &manifests[0];
    assert!(m.complete);
    assert_eq!(m.stages, ["synth", "probe-train", "pca"]);
    let paths: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
    for p in ["synthetic/labels.vbt", "probes/quad_l0.vbt", "probes/summary.csv", "pca/variance_l0.csv"] {
        assert!(paths.contains(&p), "{p} missing from {paths:?}");
    }
    assert_eq!(manifests[0], manifests[1]);
    assert_eq!(manifests[0], manifests[2]);

    let summary = std::fs::read_to_string(dir.path().join("a/probes/summary.csv")).unwrap();
    let quad: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(quad[0], "quad");
    assert!(quad[4].parse::<f64>().unwrap() > 0.9, "{summary}");
}

#[test]
fn model_pipeline_emits_every_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = model_fixture(dir.path());
    v["stages"] = json!(["trace", "probe-train", "probe-sweep", "kde", "attn-corr", "pos-probe", "ablate", "report"]);
    v["families"] = json!(["linear", "quad", "class_pointwise"]);
    v["analysis"]["cross_layers"] = json!([[1, 2]]);
    v["ablation"] = json!({"runs": [
        {"mode": "uninformed", "ratio": 0.0, "layer": 1},
        {"mode": "uninformed", "ratio": 1.0, "layer": 1}
    ], "head_recipe": {"epochs": 2, "batch_size": 2, "lr": 0.01}});
    let cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
    let out = dir.path().join("out");
    let m = run(&cfg, &out).unwrap();
    let paths: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
    for p in [
        "traces.vbt",
        "probes/quad_l2.vbt",
        "probes/class_pointwise_l0.vbt",
        "probes/cross_layer_l1_l2.vbt",
        "sweep/curve.csv",
        "kde/kde_l1.csv",
        "kde/score_map_l1.svg",
        "attention/correlation.csv",
        "attention/by_distance.csv",
        "position/rmse.csv",
        "ablation/results.csv",
        "report.md",
    ] {
        assert!(paths.contains(&p), "{p} missing from {paths:?}");
    }
    let curve = std::fs::read_to_string(out.join("sweep/curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4, "{curve}");
    let corr = std::fs::read_to_string(out.join("attention/correlation.csv")).unwrap();
    // Attention exists below the last block only.
    assert_eq!(corr.lines().count(), 3, "{corr}");
    let report = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(report.contains("## ablation/results.csv"));
    let loaded = Manifest::load(&out).unwrap();
    assert_eq!(loaded, m);
    for f in &loaded.files {
        assert_eq!(std::fs::metadata(out.join(&f.path)).unwrap().len(), f.bytes);
    }
}

#[test]
fn default_run_skips_stages_the_inputs_cannot_support() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = model_fixture(dir.path());
    v["layers"] = json!([1, 2]);
    let cfg = write_config(dir.path(), "cfg.json", v);
    let out = dir.path().join("out");
    let o = vitbind(&["--config", &cfg, "--out", out.to_str().unwrap(), "run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = Manifest::load(&out).unwrap();
    assert!(m.complete);
    assert_eq!(
        m.stages,
        ["trace", "probe-train", "probe-sweep", "kde", "attn-corr", "pos-probe", "ablate", "report"]
    );
    let ablation = std::fs::read_to_string(out.join("ablation/results.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 5, "{ablation}");
}

#[test]
fn missing_distillation_head_is_a_config_failure() {
    let dir = tempfile::tempdir().unwrap();
    let v = model_fixture(dir.path());
    let cfg = write_config(dir.path(), "cfg.json", v);
    let out = dir.path().join("out");
    let o = vitbind(&["--config", &cfg, "--layers", "1", "--out", out.to_str().unwrap(), "dino-loss"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let m = Manifest::load(&out).unwrap();
    assert!(!m.complete);
    assert!(m.files.is_empty());
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", json!({"layer": [1]}));
    assert_eq!(vitbind(&["--config", &bad, "run"]).status.code(), Some(2));

    let missing = write_config(dir.path(), "missing.json", json!({"bundle": "/no/such/model.vbt"}));
    assert_eq!(vitbind(&["--config", &missing, "trace"]).status.code(), Some(2));

    let mut v = model_fixture(dir.path());
    std::fs::write(dir.path().join("labels.vbt"), b"not an archive").unwrap();
    v["stages"] = json!(["trace"]);
    let corrupt = write_config(dir.path(), "corrupt.json", v);
    let out = dir.path().join("out");
    let o = vitbind(&["--config", &corrupt, "--out", out.to_str().unwrap(), "run"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let o = vitbind(&["--synthetic", "--layers", "2", "probe-train"]);
    assert_eq!(o.status.code(), Some(2));
}
