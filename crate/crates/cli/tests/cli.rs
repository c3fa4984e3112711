use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
seed = 3

[data]
train = 6
val = 4
test = 4

[net]
conv1_channels = 2
conv2_channels = 3

[train]
epochs = 1
warm_epochs = 1
batch_size = 3

[cma]
m1 = 1
m2 = 1
"#;

fn cmadet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmadet"))
        .args(args)
        .env("CMADET_LOG", "warn")
        .env("CMADET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cmadet(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Generates the tiny dataset and trains on it; returns (config, data, run).
fn tiny_run(root: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    let run = root.join("run");
    ok(&["gen", "--config", s(&config), "--out", s(&data)]);
    ok(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run)]);
    (config, data, run)
}

#[test]
fn full_chain_produces_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data, run) = tiny_run(dir.path());

    let manifest = read_json(&data.join("manifest.json"));
    assert_eq!(manifest["images"].as_array().unwrap().len(), 14);
    assert!(data.join("train_clean_annotations.json").exists());
    for m in 1..=2 {
        let it = run.join(format!("iter_{m:02}"));
        assert!(it.join("model.bin").exists(), "missing snapshot for iteration {m}");
    }
    let summary = read_json(&run.join("metrics.json"));
    assert_eq!(summary["iterations"].as_array().unwrap().len(), 2);

    ok(&["select", "--run", s(&run)]);
    let ens = run.join("ensemble.json");
    assert!(ens.exists());

    let dets = dir.path().join("dets.json");
    ok(&["infer", "--ensemble", s(&ens), "--images", s(&data.join("images/test")), "--out", s(&dets)]);
    assert!(read_json(&dets)["detections"].is_array());

    let report = dir.path().join("report");
    let out = ok(&[
        "eval",
        "--config",
        s(&config),
        "--detections",
        s(&dets),
        "--annotations",
        s(&data.join("test_annotations.json")),
        "--out",
        s(&report),
    ]);
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    let map = printed["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert_eq!(read_json(&report.join("metrics.json"))["map"].as_f64().unwrap(), map);
    for f in ["pr_disc.csv", "pr_square.svg", "fp.csv"] {
        assert!(report.join(f).exists(), "missing {f}");
    }
}

#[test]
fn resume_keeps_finished_iterations_and_rerun_needs_resume() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data, run) = tiny_run(dir.path());
    let before = fs::read(run.join("iter_02/model.bin")).unwrap();

    let again = cmadet(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(again.status.code(), Some(1));

    ok(&["train", "--data", s(&data), "--out", s(&run), "--resume"]);
    assert_eq!(fs::read(run.join("iter_02/model.bin")).unwrap(), before);

    // an interrupted run retrains only what is missing, to the same bytes
    fs::remove_dir_all(run.join("iter_02")).unwrap();
    ok(&["train", "--data", s(&data), "--out", s(&run), "--resume"]);
    assert_eq!(fs::read(run.join("iter_02/model.bin")).unwrap(), before);
}

#[test]
fn perfect_detections_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--config", s(&config), "--out", s(&data)]);

    let ann = read_json(&data.join("val_annotations.json"));
    let rows: Vec<Value> = ann["annotations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            let o = r.as_object_mut().unwrap();
            o.remove("object_index");
            o.insert("score".into(), 1.0.into());
            r
        })
        .collect();
    let dets = dir.path().join("perfect.json");
    fs::write(&dets, Value::Array(rows).to_string()).unwrap();
    let out = ok(&[
        "eval",
        "--config",
        s(&config),
        "--detections",
        s(&dets),
        "--annotations",
        s(&data.join("val_annotations.json")),
        "--out",
        s(&dir.path().join("report")),
    ]);
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed["map"].as_f64(), Some(1.0));
}

#[test]
fn empty_image_directory_gives_empty_detections() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, run) = tiny_run(dir.path());
    ok(&["select", "--run", s(&run)]);
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let dets = dir.path().join("dets.json");
    ok(&["infer", "--ensemble", s(&run.join("ensemble.json")), "--images", s(&empty), "--out", s(&dets)]);
    assert_eq!(read_json(&dets)["detections"].as_array().unwrap().len(), 0);
}

#[test]
fn exit_codes_separate_user_and_internal_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cmadet(&["gen", "--bogus"]).status.code(), Some(1));
    assert_eq!(cmadet(&["--help"]).status.code(), Some(0));

    let missing = dir.path().join("absent.toml");
    let out = cmadet(&["gen", "--config", s(&missing), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "version = 7\n").unwrap();
    assert_eq!(cmadet(&["gen", "--config", s(&bad), "--out", s(&dir.path().join("d"))]).status.code(), Some(1));

    let garbled = dir.path().join("garbled.json");
    fs::write(&garbled, "{ not json").unwrap();
    let out = cmadet(&[
        "eval",
        "--detections",
        s(&garbled),
        "--annotations",
        s(&garbled),
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(1));

    // an output path below a regular file cannot be created
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, b"x").unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let out = cmadet(&["gen", "--config", s(&config), "--out", s(&blocker.join("data"))]);
    assert_eq!(out.status.code(), Some(2));
}
