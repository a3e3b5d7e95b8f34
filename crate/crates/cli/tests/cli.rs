use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_witness-guard"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn witness-guard")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Planted model plus `count` faces in `dir`.
fn synthetic(dir: &Path, count: usize) {
    ok(&["make-synthetic", "--count", &count.to_string(), "--seed", "1", "--out", s(dir)]);
}

/// Copies faces `range` (image plus sidecar) into a new directory.
fn subset(dir: &Path, name: &str, range: std::ops::Range<usize>) -> PathBuf {
    let to = dir.join(name);
    fs::create_dir_all(&to).unwrap();
    for i in range {
        for ext in ["png", "json"] {
            let f = format!("face_{i:04}.{ext}");
            fs::copy(dir.join("faces").join(&f), to.join(&f)).unwrap();
        }
    }
    to
}

fn ground_truth(dir: &Path, attr: &str) -> Value {
    let all = json(&dir.join("ground_truth.json"));
    all.as_array().unwrap().iter().find(|w| w["attribute"] == attr).unwrap()["neurons"].clone()
}

#[test]
fn make_synthetic_writes_model_faces_and_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    synthetic(tmp.path(), 6);
    for f in ["model.wgrd", "spec.toml", "ground_truth.json", "faces/face_0005.png", "faces/face_0005.json"] {
        assert!(tmp.path().join(f).is_file(), "missing {f}");
    }
    assert_eq!(json(&tmp.path().join("ground_truth.json")).as_array().unwrap().len(), 4);
    let out = ok(&["forward", "--model", s(&tmp.path().join("model.wgrd")), "--image", s(&tmp.path().join("faces/face_0003.png"))]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["label"], 3);
}

#[test]
fn extracted_witnesses_match_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir, 40);
    let bases = subset(dir, "bases", 0..10);
    let donors = subset(dir, "donors", 10..40);
    for attr in ["left_eye", "mouth"] {
        let out = dir.join(format!("{attr}.json"));
        ok(&[
            "extract-witnesses",
            "--model",
            s(&dir.join("model.wgrd")),
            "--bases",
            s(&bases),
            "--donors",
            s(&donors),
            "--attr",
            attr,
            "--out",
            s(&out),
        ]);
        let got = json(&out);
        assert_eq!(got["attribute"], attr);
        assert_eq!(got["neurons"], ground_truth(dir, attr));
    }
}

#[test]
fn detect_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir, 4);
    let model = dir.join("model.wgrd");
    let witnesses = dir.join("ground_truth.json");
    let face = dir.join("faces/face_0001.png");

    let benign = run(&["detect", "--model", s(&model), "--witnesses", s(&witnesses), "--image", s(&face)]);
    assert_eq!(benign.status.code(), Some(0), "{}", String::from_utf8_lossy(&benign.stderr));
    let report: Value = serde_json::from_slice(&benign.stdout).unwrap();
    assert_eq!(report["is_adversarial"], false);
    assert_eq!(report["mode"], "full");

    let adv_dir = dir.join("adv");
    ok(&["gen-attack", "--kind", "greedy_l0", "--model", s(&model), "--image", s(&face), "--out", s(&adv_dir)]);
    let sidecar = json(&adv_dir.join("face_0001_greedy_l0.json"));
    assert_eq!(sidecar["success"], true);
    let adv = adv_dir.join("face_0001_greedy_l0.png");
    let flagged = run(&["detect", "--model", s(&model), "--witnesses", s(&witnesses), "--image", s(&adv)]);
    assert_eq!(flagged.status.code(), Some(3), "{}", String::from_utf8_lossy(&flagged.stderr));

    let missing = run(&["detect", "--model", s(&dir.join("nope.wgrd")), "--witnesses", s(&witnesses), "--image", s(&face)]);
    assert_eq!(missing.status.code(), Some(1));
    let err = String::from_utf8_lossy(&missing.stderr);
    assert!(err.starts_with("error:") && err.contains("nope.wgrd"), "{err}");
}

#[test]
fn gen_attack_sidecar_respects_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir, 3);
    let model = dir.join("model.wgrd");
    let face = dir.join("faces/face_0002.png");
    let out = dir.join("adv");
    ok(&["gen-attack", "--kind", "bim", "--model", s(&model), "--image", s(&face), "--eps", "0.02", "--out", s(&out)]);
    let side = json(&out.join("face_0002_bim.json"));
    assert_eq!(side["kind"], "bim");
    assert_eq!(side["true_label"], 2);
    assert_eq!(side["source_label"], 2);
    assert!(side["linf"].as_f64().unwrap() <= 0.02 + 1e-9);
    assert!(side["success"].is_boolean());

    ok(&["gen-attack", "--kind", "greedy_l0", "--model", s(&model), "--image", s(&face), "--max-pixels", "3", "--out", s(&out)]);
    let side = json(&out.join("face_0002_greedy_l0.json"));
    assert!(side["changed_pixels"].as_u64().unwrap() <= 3);

    let bad = run(&["gen-attack", "--kind", "cw", "--model", s(&model), "--image", s(&face), "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn eval_writes_json_and_per_mode_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir, 8);
    let model = dir.join("model.wgrd");
    let benign = subset(dir, "benign", 0..6);
    let attacks = dir.join("greedy");
    for i in 0..3 {
        let face = dir.join(format!("faces/face_{i:04}.png"));
        ok(&["gen-attack", "--kind", "greedy_l0", "--model", s(&model), "--image", s(&face), "--out", s(&attacks)]);
    }
    let out = dir.join("report.json");
    ok(&[
        "eval",
        "--model",
        s(&model),
        "--witnesses",
        s(&dir.join("ground_truth.json")),
        "--benign",
        s(&benign),
        "--attacks",
        s(&attacks),
        "--mode",
        "full,strengthen_only",
        "--out",
        s(&out),
    ]);
    let report = json(&out);
    let tables = report["tables"].as_array().unwrap();
    assert_eq!(tables.len(), 2);
    assert_eq!(tables[0]["mode"], "full");
    assert_eq!(tables[0]["false_positive"]["total"], 6);
    assert_eq!(tables[0]["attacks"][0]["samples"], 3);
    for mode in ["full", "strengthen_only"] {
        let csv = fs::read_to_string(dir.join(format!("report.{mode}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 1 + 6 + 3, "{csv}");
    }
}

#[test]
fn steering_config_file_and_flags_combine() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir, 2);
    let cfg = dir.join("steer.toml");
    fs::write(&cfg, "alpha = 5.0\nbeta = 30.0\nconserve = false\n").unwrap();
    let out = ok(&[
        "steer",
        "--model",
        s(&dir.join("model.wgrd")),
        "--witnesses",
        s(&dir.join("ground_truth.json")),
        "--image",
        s(&dir.join("faces/face_0000.png")),
        "--config",
        s(&cfg),
        "--alpha",
        "7",
    ]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["config"]["alpha"], 7.0);
    assert_eq!(v["config"]["beta"], 30.0);
    assert_eq!(v["config"]["conserve"], false);
    assert_eq!(v["config"]["epsilon"], 1.15);
    assert_eq!(v["original_label"], v["steered_label"]);

    fs::write(&cfg, "alpha = -1.0\n").unwrap();
    let bad = run(&[
        "steer",
        "--model",
        s(&dir.join("model.wgrd")),
        "--witnesses",
        s(&dir.join("ground_truth.json")),
        "--image",
        s(&dir.join("faces/face_0000.png")),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(bad.status.code(), Some(1));
}
