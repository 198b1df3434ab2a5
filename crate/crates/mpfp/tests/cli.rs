use std::path::Path;
use std::process::{Command, Output};

fn mpfp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpfp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["--bogus"][..],
        &[][..],
        &["train", "--fusion", "median"],
        &["train", "--psi", "7"],
        &["fuse-bench", "--reps", "0"],
    ] {
        let o = mpfp(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn bad_config_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"epochs": 3, "not_a_field": 1}"#).unwrap();
    let o = mpfp(dir.path(), &["--config", "c.json", "train"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    // No dataset at the default location.
    let o = mpfp(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mpfp(dir.path(), &["--config", "missing.json", "train"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn dump_config_applies_flags_over_the_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"epochs": 3, "seed": 5}"#).unwrap();
    let o = mpfp(
        dir.path(),
        &["--config", "c.json", "--seed", "9", "--fusion", "softmax", "--out", "elsewhere", "train", "--dump-config"],
    );
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["epochs"], 3);
    assert_eq!(v["seed"], 9);
    assert_eq!(v["fusion"], "softmax");
    assert_eq!(v["out"], "elsewhere");
    // Nothing was trained.
    assert!(!dir.path().join("elsewhere").exists());
}

#[test]
fn scale_table_prints_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = mpfp(dir.path(), &["scale-table", "--out", "st"]);
    assert_eq!(o.status.code(), Some(0));
    let rows: Vec<serde_json::Value> = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rows.len(), 7);
    assert_eq!(rows[6]["input_size"], 1280);
    assert!(dir.path().join("st/graph.json").exists());
}

#[test]
fn synth_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let o = mpfp(dir.path(), &["synth", "--out", "d"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let data = mpfp::synth::load(&dir.path().join("d")).unwrap();
    assert_eq!(data.images.len(), 250);
    // Same seed, same bytes.
    let o = mpfp(dir.path(), &["synth", "--out", "e"]);
    assert_eq!(o.status.code(), Some(0));
    for f in ["index.json", "checksums.txt"] {
        assert_eq!(
            std::fs::read(dir.path().join("d").join(f)).unwrap(),
            std::fs::read(dir.path().join("e").join(f)).unwrap()
        );
    }
}

#[test]
fn train_then_eval_on_a_tiny_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{
        "input_size": 128, "hidden": 8, "epochs": 1, "batch_size": 8,
        "windows": [[20, 11]], "neck": "none",
        "synth": {"train_images": 8, "test_images": 4}
    }"#;
    std::fs::write(dir.path().join("c.json"), cfg).unwrap();
    let o = mpfp(dir.path(), &["--config", "c.json", "synth", "--out", "data"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = mpfp(dir.path(), &["--config", "c.json", "train", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    for f in ["loss_log.csv", "metrics.json", "detections.json", "config.json", "pr_square.csv", "checkpoint/params.bin"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let metrics = std::fs::read(run.join("metrics.json")).unwrap();
    let o = mpfp(dir.path(), &["--config", "c.json", "eval", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(run.join("metrics.json")).unwrap(), metrics);
    let pr = std::fs::read_to_string(run.join("pr_square.csv")).unwrap();
    assert!(pr.starts_with("class,threshold,precision,recall\n"));
}

#[test]
fn fuse_bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = mpfp(dir.path(), &["fuse-bench", "--reps", "3", "--channels", "2", "--side", "8", "--out", "b"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("b/fuse_bench.csv")).unwrap();
    assert!(csv.starts_with("fusion_mode,map_shape,reps,median_ns,p90_ns\n"));
    assert!(stdout(&o).contains("instant/softmax median ratio"));
}
