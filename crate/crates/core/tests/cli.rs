use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_bckd");

fn bckd(root: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("BCKD_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = bckd(root, args);
    assert!(
        out.status.success(),
        "bckd {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    for dir in [&a, &b] {
        ok(root.path(), &["gen-data", "--train-scenes", "3", "--val-scenes", "2", "--out", dir.to_str().unwrap()]);
    }
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.iter().any(|(p, _)| p.extension().is_some_and(|e| e == "ppm")));
    assert_eq!(fa, fb);
}

#[test]
fn gen_data_refuses_non_empty_output_without_force() {
    let root = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--train-scenes", "2", "--val-scenes", "1"];
    ok(root.path(), &args);
    let again = bckd(root.path(), &args);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(root.path(), &[&args[..], &["--force"]].concat());
}

#[test]
fn gen_data_rejects_zero_scenes() {
    let root = tempfile::tempdir().unwrap();
    let out = bckd(root.path(), &["gen-data", "--train-scenes", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("scene counts"));
    assert!(!root.path().join("data").exists());
}

#[test]
fn output_root_env_sets_default_locations() {
    let root = tempfile::tempdir().unwrap();
    let stdout = ok(root.path(), &["demo-inconsistency"]);
    let report = read_json(&root.path().join("demo_inconsistency.json"));
    assert_eq!(report, serde_json::from_str::<Value>(&stdout).unwrap());
    assert!(report["kl_loss"].as_f64().unwrap() <= 1e-9);
    assert!(report["sigmoid_l1_gap"].as_f64().unwrap() >= 0.3);
    assert!(report["bckd_loss"].as_f64().unwrap() > 0.0);

    // An explicit flag beats the environment.
    let other = tempfile::tempdir().unwrap();
    ok(root.path(), &["--output-root", other.path().to_str().unwrap(), "demo-inconsistency"]);
    assert!(other.path().join("demo_inconsistency.json").exists());
}

#[test]
fn pipeline_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let cfg = r.join("tiny.json");
    fs::write(
        &cfg,
        r#"{"student_epochs": 2, "teacher_epochs": 2, "data": {"train_scenes": 8, "val_scenes": 4}}"#,
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    ok(r, &["--config", c, "gen-data"]);
    ok(r, &["--config", c, "train-teacher"]);
    ok(r, &["--config", c, "train-student"]);
    let teacher = r.join("teacher/checkpoint.json");
    let student = r.join("student_baseline/checkpoint.json");
    let t = teacher.to_str().unwrap();

    let metrics = fs::read_to_string(r.join("student_baseline/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let run = read_json(&r.join("student_baseline/run.json"));
    assert_eq!(run["epochs"].as_array().unwrap().len(), 2);

    let report: Value = serde_json::from_str(&ok(r, &["--config", c, "distill", "--teacher", t, "--cls-only"])).unwrap();
    assert!((0.0..=1.0).contains(&report["map"].as_f64().unwrap()));
    let saved = read_json(&r.join("distill/config.json"));
    assert_eq!(saved["distill"]["use_loc"], Value::Bool(false));

    let conflict = bckd(r, &["distill", "--teacher", t, "--cls-only", "--loc-only"]);
    assert!(!conflict.status.success());
    let self_kd = bckd(r, &["--config", c, "distill", "--teacher", t, "--self-kd", "--out", "/nonexistent/never"]);
    assert!(!self_kd.status.success(), "self-KD with a wider teacher must be rejected");

    ok(r, &["--config", c, "eval", "--checkpoint", student.to_str().unwrap()]);
    assert!(r.join("eval/eval_report.json").exists());
    assert!(r.join("eval/detections.json").exists());

    let csv = ok(r, &["--config", c, "ablate", "--teacher", t, "--alpha1-grid", "1", "--alpha2-grid", "2,4"]);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "alpha1,alpha2,mAP,AP50,AP75");
    assert_eq!(rows.len(), 3);
    assert_eq!(fs::read_to_string(r.join("ablate/ablation.csv")).unwrap(), csv);

    let gap = ok(r, &["--config", c, "score-gap", "--teacher", t, "--student", student.to_str().unwrap()]);
    assert!(gap.starts_with("mean_gap "));
    let summary = read_json(&r.join("score_gap/gap_summary.json"));
    assert_eq!(summary["per_image_mean"].as_array().unwrap().len(), 4);
    let grid = fs::read_to_string(r.join("score_gap/gap_0.csv")).unwrap();
    assert_eq!(grid.lines().count(), 8);
    assert!(grid.lines().all(|l| l.split(',').count() == 8));
}

#[test]
fn training_is_reproducible_across_execution_modes() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let cfg = r.join("tiny.json");
    fs::write(&cfg, r#"{"student_epochs": 1, "data": {"train_scenes": 8, "val_scenes": 2}}"#).unwrap();
    let c = cfg.to_str().unwrap();
    ok(r, &["--config", c, "gen-data"]);
    ok(r, &["--config", c, "train-student", "--out", r.join("par").to_str().unwrap()]);
    ok(r, &["--config", c, "--sequential", "train-student", "--out", r.join("seq").to_str().unwrap()]);
    for f in ["checkpoint.json", "metrics.jsonl"] {
        assert_eq!(fs::read(r.join("par").join(f)).unwrap(), fs::read(r.join("seq").join(f)).unwrap(), "{f}");
    }
}
