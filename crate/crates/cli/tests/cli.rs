//! Drives the `s2i` binary through every subcommand.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn s2i(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2i"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = s2i(args);
    assert!(
        out.status.success(),
        "s2i {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Tiny corpus plus a config shrunk to a few seconds of training.
fn prepare(root: &Path) -> PathBuf {
    let data = root.join("data");
    ok(&[
        "gen-toy",
        "--out",
        p(&data),
        "--images",
        "20",
        "--vocab",
        "6",
        "--seed",
        "4",
        "--captions-per-image",
        "2",
        "--min-words",
        "2",
        "--max-words",
        "3",
    ]);
    let cfg_path = data.join("train_config.json");
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg["train"]["epochs"] = 4.into();
    cfg["train"]["snapshot_every"] = 2.into();
    cfg["train"]["batch_size"] = 4.into();
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    cfg_path
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let cfg = prepare(root);
    let data = root.join("data");
    let run = root.join("run");
    ok(&["train", "--config", p(&cfg), "--out", p(&run)]);
    let s2 = run.join("snapshot_e002.s2i");
    let s4 = run.join("snapshot_e004.s2i");
    let manifest = data.join("manifest.jsonl");
    let single = root.join("single.json");
    let both = root.join("both.json");
    ok(&[
        "evaluate",
        "--snapshots",
        p(&s4),
        "--manifest",
        p(&manifest),
        "--out",
        p(&single),
    ]);
    let pair = format!("{},{}", p(&s2), p(&s4));
    ok(&[
        "evaluate",
        "--snapshots",
        &pair,
        "--manifest",
        p(&manifest),
        "--split",
        "dev",
        "--out",
        p(&both),
    ]);
    let probe = root.join("probe.json");
    ok(&[
        "probe",
        "--snapshot",
        p(&s4),
        "--layer",
        "gru2",
        "--manifest",
        p(&manifest),
        "--out",
        p(&probe),
        "--epochs",
        "2",
        "--min-word-count",
        "5",
    ]);
    let mut out = Vec::new();
    for f in [
        run.join("snapshot_e002.s2i"),
        run.join("snapshot_e002.json"),
        s4.clone(),
        run.join("snapshot_e004.json"),
        run.join("train_log.jsonl"),
        run.join("train_summary.json"),
        single.clone(),
        root.join("single.csv"),
        both.clone(),
        probe.clone(),
        root.join("probe.f1.csv"),
    ] {
        out.push((
            f.file_name().unwrap().to_string_lossy().into_owned(),
            read(&f),
        ));
    }
    out
}

#[test]
fn full_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        assert!(x == y, "{name} differs between identical runs");
    }

    let get = |n: &str| -> serde_json::Value {
        let bytes = &first.iter().find(|(f, _)| f == n).unwrap().1;
        serde_json::from_slice(bytes).unwrap()
    };
    let single = get("single.json");
    assert_eq!(single["snapshots"].as_array().unwrap().len(), 1);
    assert_eq!(single["split"], "test");
    assert_eq!(single["n_images"], 10);
    assert!(single["caption_to_image"]["r_at"]["10"].as_f64().unwrap() >= 0.0);
    let both = get("both.json");
    assert_eq!(both["snapshots"].as_array().unwrap().len(), 2);
    assert_eq!(both["split"], "dev");
    let probe = get("probe.json");
    assert_eq!(probe["layer"], "gru2");
    assert_eq!(probe["f1_curve"].as_array().unwrap().len(), 20);
    assert!(single["config_hash"].as_str().unwrap().len() == 64);
    assert_eq!(single["config_hash"], probe["config_hash"]);
}

#[test]
fn extract_writes_one_feature_file_per_utterance() {
    let root = tempfile::tempdir().unwrap();
    prepare(root.path());
    let data = root.path().join("data");
    let feats = root.path().join("feats");
    ok(&[
        "extract",
        "--manifest",
        p(&data.join("manifest.jsonl")),
        "--out",
        p(&feats),
        "--workers",
        "2",
    ]);
    let manifest = std::fs::read_to_string(feats.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 40);
    assert!(!manifest.contains("audio_path"));
    assert_eq!(
        std::fs::read_dir(feats.join("features")).unwrap().count(),
        40
    );
    assert!(feats.join("image_features.f32m").exists());

    // the same order and bytes with one worker
    let serial = root.path().join("serial");
    ok(&[
        "extract",
        "--manifest",
        p(&data.join("manifest.jsonl")),
        "--out",
        p(&serial),
    ]);
    assert_eq!(
        read(&feats.join("manifest.jsonl")),
        read(&serial.join("manifest.jsonl"))
    );
    for e in std::fs::read_dir(feats.join("features")).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(
            read(&feats.join("features").join(&name)),
            read(&serial.join("features").join(&name))
        );
    }
}

#[test]
fn exit_codes_separate_bad_input_from_failures() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(s2i(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(s2i(&[]).status.code(), Some(1));
    assert_eq!(s2i(&["--help"]).status.code(), Some(0));

    let cfg = prepare(root.path());
    let manifest = root.path().join("data/manifest.jsonl");
    let out = root.path().join("r.json");
    let bad_split = s2i(&[
        "evaluate",
        "--snapshots",
        "x.s2i",
        "--manifest",
        p(&manifest),
        "--split",
        "valid",
        "--out",
        p(&out),
    ]);
    assert_eq!(bad_split.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_split.stderr).contains("valid"));

    let missing = s2i(&[
        "evaluate",
        "--snapshots",
        p(&root.path().join("nope.s2i")),
        "--manifest",
        p(&manifest),
        "--out",
        p(&out),
    ]);
    assert_eq!(missing.status.code(), Some(2));

    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text = text.replacen("{", "{\"unknown_key\": 1,", 1);
    std::fs::write(&cfg, text).unwrap();
    let bad_cfg = s2i(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&root.path().join("run")),
    ]);
    assert_eq!(bad_cfg.status.code(), Some(1));

    let bad_layer = s2i(&[
        "probe",
        "--snapshot",
        "x.s2i",
        "--layer",
        "gru9x",
        "--manifest",
        p(&manifest),
        "--out",
        p(&out),
    ]);
    assert_eq!(bad_layer.status.code(), Some(1));

    let clobber = s2i(&[
        "evaluate",
        "--snapshots",
        "x.s2i",
        "--manifest",
        p(&manifest),
        "--out",
        p(&manifest),
    ]);
    assert_eq!(clobber.status.code(), Some(1));
}
