use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sketchkp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("SKETCHKP_CACHE").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
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

/// Small synthetic dataset plus its config path.
fn dataset(dir: &Path) -> PathBuf {
    let root = dir.join("data");
    ok(&["synth", "--out", s(&root), "--classes", "3", "--per-class", "10", "--size", "64"]);
    root.join("tiny.toml")
}

const SMALL: [&str; 4] = ["image_size=64", "encoder.channels=8", "iterations=10", "checkpoint_every=5"];

fn small(extra: &[&str]) -> Vec<String> {
    SMALL.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn train(config: &Path, overrides: &[String]) -> PathBuf {
    let mut args = vec!["train", "--config", s(config), "--log-every", "0"];
    args.extend(overrides.iter().map(|s| s.as_str()));
    PathBuf::from(ok(&args).trim())
}

#[test]
fn make_edgemaps_generates_then_skips() {
    let dir = tempfile::tempdir().unwrap();
    let config = dataset(dir.path());
    let cache = dir.path().join("fresh_cache");
    let first = ok(&["make-edgemaps", "--config", s(&config), "--cache-dir", s(&cache)]);
    assert_eq!(first.trim(), "generated 30 skipped 0 missing 0");
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 30);
    assert!(cache.join("hexa_000.S.png").exists());
    let second = ok(&["make-edgemaps", "--config", s(&config), "--cache-dir", s(&cache)]);
    assert_eq!(second.trim(), "generated 0 skipped 30 missing 0");
}

#[test]
fn missing_external_edgemaps_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dataset(dir.path());
    let empty = dir.path().join("empty");
    let out = run(&["make-edgemaps", "--config", s(&config), "--detector", "external_S1", "--cache-dir", s(&empty)]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("hexa_000.S1.png"), "{stderr}");
    assert_eq!(stderr.lines().filter(|l| l.ends_with(".S1.png")).count(), 30);
}

#[test]
fn training_is_deterministic_and_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = dataset(dir.path());
    // Same run_dir both times: the checkpoint embeds the config.
    let ck = train(&config, &small(&["seed=7", "run_dir=runs/a"]));
    assert!(ck.ends_with("checkpoint.safetensors") && ck.exists());
    let log_a = std::fs::read(ck.with_file_name("train.jsonl")).unwrap();
    let weights_a = std::fs::read(&ck).unwrap();
    train(&config, &small(&["seed=7", "run_dir=runs/a"]));
    let log_b = std::fs::read(ck.with_file_name("train.jsonl")).unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(String::from_utf8(log_a).unwrap().lines().count(), 10);
    assert!(weights_a == std::fs::read(&ck).unwrap(), "checkpoints differ");
}

#[test]
fn zero_lambda_da_logs_zero_transport_loss() {
    let dir = tempfile::tempdir().unwrap();
    let config = dataset(dir.path());
    let ck = train(&config, &small(&["lambda_da=0", "run_dir=runs/noda"]));
    let log = std::fs::read_to_string(ck.with_file_name("train.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["da"].as_f64(), Some(0.0));
        assert_eq!(v["da_aux"].as_f64(), Some(0.0));
        assert_eq!(v["da_skipped"].as_bool(), Some(true));
    }
}

#[test]
fn missing_dataset_exits_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.toml");
    std::fs::write(&config, "dataset = \"nowhere/index.json\"\n").unwrap();
    let out = run(&["train", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("does not exist") && stderr.contains("index.json"), "{stderr}");
}

#[test]
fn eval_is_byte_identical_and_report_has_one_row_per_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let config = dataset(dir.path());
    let unseen = ["unseen_classes=[\"bowtie\"]", "eval_episodes=6", "run_dir=runs/ev"];
    let overrides = small(&unseen);
    let ck = train(&config, &overrides);
    let mut reports = Vec::new();
    for protocol in ["seen_base", "seen_novel", "unseen_base", "unseen_novel"] {
        let out = dir.path().join(format!("{protocol}.json"));
        let mut args = vec!["eval", "--config", s(&config), "--checkpoint", s(&ck), "--protocol", protocol];
        args.extend(["--out", s(&out)]);
        args.extend(overrides.iter().map(|s| s.as_str()));
        ok(&args);
        if protocol == "seen_base" {
            let first = std::fs::read(&out).unwrap();
            ok(&args);
            assert_eq!(first, std::fs::read(&out).unwrap());
        }
        reports.push(out);
    }
    let mut args = vec!["report"];
    args.extend(reports.iter().map(|p| s(p)));
    let table = ok(&args);
    for protocol in ["seen_base", "seen_novel", "unseen_base", "unseen_novel"] {
        assert_eq!(table.lines().filter(|l| l.starts_with(protocol)).count(), 1, "{table}");
    }
}

#[test]
fn eval_rejects_a_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = dataset(dir.path());
    let ck = train(&config, &small(&["run_dir=runs/mm"]));
    let mut args = vec!["eval", "--config", s(&config), "--checkpoint", s(&ck), "--protocol", "seen_base"];
    args.extend(["image_size=96", "encoder.channels=8"]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("differs"));
}

#[test]
fn predict_emits_one_coordinate_pair_per_keypoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = dataset(dir.path());
    let ck = train(&config, &small(&["run_dir=runs/pr"]));
    let data = config.parent().unwrap();
    let index: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(data.join("index.json")).unwrap()).unwrap();
    let mut record = index["images"][0].clone();
    record["path"] = serde_json::json!(data.join("cache/hexa_000.S2.png"));
    record["modality"] = serde_json::json!("sketch");
    let support = serde_json::json!({
        "keypoint_names": index["keypoint_names"],
        "base_keypoints": index["base_keypoints"],
        "novel_keypoints": index["novel_keypoints"],
        "images": [record],
    });
    let support_path = dir.path().join("support.json");
    std::fs::write(&support_path, support.to_string()).unwrap();
    let q1 = data.join("images/hexa_004.png");
    let q2 = data.join("images/star_002.png");
    let overlays = dir.path().join("overlays");
    std::fs::create_dir_all(&overlays).unwrap();
    let text = ok(&[
        "predict",
        "--checkpoint",
        s(&ck),
        "--support",
        s(&support_path),
        "--queries",
        s(&q1),
        s(&q2),
        "--overlay-dir",
        s(&overlays),
        "--debug-scales",
    ]);
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let preds = doc["predictions"].as_array().unwrap();
    assert_eq!(preds.len(), 2);
    for p in preds {
        let kps = p["keypoints"].as_array().unwrap();
        assert_eq!(kps.len(), 6);
        for k in kps {
            let (x, y) = (k["x"].as_f64().unwrap(), k["y"].as_f64().unwrap());
            assert!((0.0..=64.0).contains(&x) && (0.0..=64.0).contains(&y));
            assert_eq!(k["per_scale"].as_array().unwrap().len(), 3);
        }
    }
    assert!(overlays.join("hexa_004.overlay.png").exists());
}
