use std::path::Path;
use std::process::{Command, Output};

fn flowparts(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowparts"))
        .args(args)
        .current_dir(dir)
        .env_remove("FLOWPARTS_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, json: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p.display().to_string()
}

const GEN: &str = r#"{"height": 16, "width": 16, "splits": {"train": 6, "val": 2, "test": 3},
    "scale_min": 0.25, "scale_max": 0.45, "max_translation_px": 2, "seed": 3}"#;

const TRAIN: &str = r#"{"epochs": 1, "batch_size": 4, "micro_batch": 2, "learning_rate": 0.001,
    "num_capsules": 3, "capsule_dim": 8, "height": 16, "width": 16,
    "encoder_channels": [4, 8], "encoder_hidden": 16, "norm_groups": 2,
    "decoder_layers": 2, "decoder_width": 12, "canonical_grid": 6,
    "checkpoint_every": 0, "val_samples": 2, "precision": "f64"}"#;

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn gen_dry_run_prints_counts_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "gen.json", GEN);
    let o = flowparts(&["gen", "--config", &cfg, "--out", "data", "--dry-run"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("11 samples (train 6, val 2, test 3)"), "{out}");
    assert!(!dir.path().join("data").exists());
}

#[test]
fn missing_assets_exit_with_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "gen.json",
        r#"{"mode": "geo_plus", "height": 16, "width": 16,
            "assets": {"backgrounds": "no/such/dir", "textures": "no/such/dir"}}"#,
    );
    let o = flowparts(&["gen", "--config", &cfg, "--out", "data"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("asset"));

    let cfg = write(dir.path(), "gen2.json", r#"{"mode": "geo_plus"}"#);
    let o = flowparts(&["gen", "--config", &cfg, "--out", "data", "--dry-run"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_config_and_usage_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", "{ not json");
    assert_eq!(code(&flowparts(&["gen", "--config", &cfg, "--out", "d"], dir.path())), 2);
    assert_eq!(code(&flowparts(&["gen", "--config", "missing.json", "--out", "d"], dir.path())), 2);
    assert_eq!(code(&flowparts(&["frobnicate"], dir.path())), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_flowparts"))
        .args(["gen", "--config", &write(dir.path(), "g.json", GEN), "--out", "d", "--dry-run"])
        .current_dir(dir.path())
        .env("FLOWPARTS_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_train_eval_viz_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let gen = write(p, "gen.json", GEN);
    let train = write(p, "train.json", TRAIN);

    let o = flowparts(&["gen", "--config", &gen, "--out", "data"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("data/manifest.json").is_file());

    let o = flowparts(
        &["train", "--config", &train, "--data", "data", "--out", "run", "--deterministic"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = p.join("run/checkpoints/step_00000002.safetensors");
    assert!(ckpt.is_file());
    let ckpt = ckpt.display().to_string();

    let o = flowparts(
        &["eval", "--ckpt", &ckpt, "--data", "data", "--report", "out/report.json", "--clusters", "2"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p.join("out/report.json")).unwrap()).unwrap();
    for key in ["dataset", "checkpoint", "per_class", "overall", "epe", "cluster"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["n_samples"], 3);
    assert_eq!(report["cluster"]["n_clusters"], 2);

    let o = flowparts(&["viz", "--ckpt", &ckpt, "--sample", "0", "--data", "data", "--out", "viz"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["mask_0.png", "mask_1.png", "mask_2.png", "overlay.png", "flow.png", "warped.png"] {
        assert!(p.join("viz").join(f).is_file(), "{f}");
    }
    assert!(!p.join("viz/mask_3.png").exists());

    let img = p.join("data/test/0_a.png").display().to_string();
    let o = flowparts(&["viz", "--ckpt", &ckpt, "--image", &img, "--out", "viz1"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("viz1/overlay.png").is_file());
    assert!(!p.join("viz1/flow.png").exists());

    // Same pair twice: identical frames give zero flow, rendered white.
    let o = flowparts(
        &["viz", "--ckpt", &ckpt, "--image", &img, "--image-b", &img, "--out", "viz2"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let flow = image::open(p.join("viz2/flow.png")).unwrap().to_rgb8();
    assert!(flow.pixels().all(|px| px.0 == [255, 255, 255]));

    // Eval against a checkpoint of the wrong resolution family fails cleanly.
    let o = flowparts(&["eval", "--ckpt", "nope.safetensors", "--data", "data", "--report", "r.json"], p);
    assert_ne!(code(&o), 0);
}

#[test]
fn deterministic_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let gen = write(p, "gen.json", GEN);
    let train = write(p, "train.json", TRAIN);
    assert_eq!(code(&flowparts(&["gen", "--config", &gen, "--out", "data"], p)), 0);
    for run in ["r1", "r2"] {
        let o = flowparts(
            &["train", "--config", &train, "--data", "data", "--out", run, "--deterministic"],
            p,
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.jsonl", "checkpoints/step_00000002.safetensors"] {
        assert_eq!(
            std::fs::read(p.join("r1").join(f)).unwrap(),
            std::fs::read(p.join("r2").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn ablate_reports_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let gen = write(p, "gen.json", GEN);
    assert_eq!(code(&flowparts(&["gen", "--config", &gen, "--out", "data"], p)), 0);
    let train = write(p, "train.json", TRAIN);
    let sweep = write(p, "sweep.json", r#"{"num_capsules": [2, 3], "seeds": [0]}"#);
    let o = flowparts(
        &["ablate", "--config", &train, "--sweep", &sweep, "--data", "data", "--out", "abl"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let md = std::fs::read_to_string(p.join("abl/ablation.md")).unwrap();
    assert_eq!(md.lines().filter(|l| l.starts_with("| K |")).count(), 2);
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p.join("abl/ablation.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    assert!(json["rows"][0]["runs"][0]["iou"].is_number());
}

#[test]
fn shipped_configs_are_valid() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().unwrap();
    let gen = configs.join("geo_mini_gen.json").display().to_string();
    let o = flowparts(&["gen", "--config", &gen, "--out", "data", "--dry-run"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("(train 10000, val 1000, test 1000)"));

    let plus: flowparts::datagen::GenConfig =
        serde_json::from_slice(&std::fs::read(configs.join("geo_plus_mini_gen.json")).unwrap()).unwrap();
    plus.validate().unwrap();

    let train = flowparts::training::TrainConfig::from_json_file(configs.join("geo_mini_train.json")).unwrap();
    train.validate().unwrap();
    assert_eq!((train.epochs, train.model.num_capsules, train.model.capsule_dim), (50, 8, 32));

    let sweep = flowparts::ablation::SweepSpec::from_json_file(configs.join("ablation_sweep.json")).unwrap();
    sweep.validate().unwrap();
    assert_eq!(sweep.variants().len(), 8);
}
