use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn pstnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pstnet"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PSTCONV_THREADS")
        .output()
        .expect("spawn pstnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn single_layer(l: usize, s_t: usize, p: [usize; 2], s_s: usize) -> String {
    format!(
        r#"{{"task":"classification","input_channels":0,"clip_len":5,"num_classes":4,
            "init_scale":1.0,"radius_multiplier":1.0,
            "layers":[{{"kind":"pstconv","name":"conv","c_in":0,"c_mid":4,"c_out":4,
                        "spec":{{"l":{l},"s_t":{s_t},"p":[{},{}],"s_s":{s_s},"r":0.5,"k":3}}}}]}}"#,
        p[0], p[1]
    )
}

fn tiny_seg_setup(dir: &Path, count: &str) {
    let gen = pstnet(&["generate", "--task", "seg", "--out", "data", "--count", count, "--seed", "3"], dir);
    assert!(gen.status.success(), "{}", stderr(&gen));
    let init = pstnet(&["init-config", "--task", "seg", "--out", "seg.json", "--widths", "8,8,8,8,8,8,8,8"], dir);
    assert!(init.status.success(), "{}", stderr(&init));
}

#[test]
fn inspect_prints_the_encoded_shape() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("strided.json"), single_layer(3, 2, [1, 1], 4)).unwrap();
    let out = pstnet(&["inspect", "--config", "strided.json", "--L", "5", "--N", "8"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("5x8 -> 3x2"), "{}", stdout(&out));
}

#[test]
fn inspect_unit_strides_keep_the_shape() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("id.json"), single_layer(1, 1, [0, 0], 1)).unwrap();
    let out = pstnet(&["inspect", "--config", "id.json", "--L", "5", "--N", "8"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("5x8 -> 5x8"));
}

#[test]
fn inspect_rejects_padding_wider_than_half_kernel() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.json"), single_layer(3, 1, [2, 0], 1)).unwrap();
    let out = pstnet(&["inspect", "--config", "bad.json", "--L", "5", "--N", "8"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("invalid argument"), "{}", stderr(&out));
}

#[test]
fn generate_is_deterministic_and_covers_every_motion() {
    let dir = TempDir::new().unwrap();
    for out in ["a", "b"] {
        let o = pstnet(&["generate", "--task", "cls", "--out", out, "--count", "144", "--seed", "0"], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    let mut labels: Vec<i64> =
        manifest["records"].as_array().unwrap().iter().map(|r| r["label"].as_i64().unwrap()).collect();
    labels.sort_unstable();
    labels.dedup();
    assert_eq!(labels, (0..144).collect::<Vec<_>>());

    let mut names: Vec<_> = fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 145);
    for name in names {
        let a = fs::read(dir.path().join("a").join(&name)).unwrap();
        let b = fs::read(dir.path().join("b").join(&name)).unwrap();
        assert!(a == b, "{name:?} differs");
    }
}

#[test]
fn missing_digit_file_is_a_parse_error() {
    let dir = TempDir::new().unwrap();
    let out = pstnet(&["generate", "--task", "cls", "--out", "x", "--digits", "nope.idx"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("parse error"), "{}", stderr(&out));
}

#[test]
fn unknown_flags_exit_with_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(pstnet(&["inspect", "--bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(pstnet(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn invalid_thread_cap_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pstnet"))
        .args(["gradcheck"])
        .current_dir(dir.path())
        .env("PSTCONV_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_at_default_tolerance_and_is_repeatable() {
    let dir = TempDir::new().unwrap();
    let a = pstnet(&["gradcheck", "--seed", "1"], dir.path());
    assert!(a.status.success(), "{}", stdout(&a));
    let b = pstnet(&["gradcheck", "--seed", "1"], dir.path());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn gradcheck_at_impossible_tolerance_names_the_failing_ops() {
    let dir = TempDir::new().unwrap();
    let out = pstnet(&["gradcheck", "--tol", "1e-12"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("FAIL"));
    assert!(stderr(&out).contains("gradient check failed"));
}

#[test]
fn gradcheck_covers_a_configured_network() {
    let dir = TempDir::new().unwrap();
    tiny_seg_setup(dir.path(), "4");
    let out = pstnet(&["gradcheck", "--config", "seg.json"], dir.path());
    assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));
    assert!(stdout(&out).contains("config."));
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_the_logged_metric() {
    let dir = TempDir::new().unwrap();
    tiny_seg_setup(dir.path(), "10");
    let out = pstnet(
        &["train", "--config", "seg.json", "--data", "data", "--epochs", "1", "--batch", "4", "--out", "run"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["run.json", "metrics.csv", "best.ckpt", "last.ckpt"] {
        assert!(dir.path().join("run").join(f).exists(), "missing {f}");
    }

    let mut log = csv::Reader::from_path(dir.path().join("run/metrics.csv")).unwrap();
    let test_row = log.records().map(|r| r.unwrap()).find(|r| &r[1] == "test").expect("test row");
    let logged_miou: f64 = test_row[5].parse().unwrap();
    let logged_acc: f64 = test_row[4].parse().unwrap();

    let eval = pstnet(&["eval", "--checkpoint", "run/best.ckpt", "--data", "data"], dir.path());
    assert!(eval.status.success(), "{}", stderr(&eval));
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["miou"].as_f64().unwrap().to_bits(), logged_miou.to_bits());
    assert_eq!(report["accuracy"].as_f64().unwrap().to_bits(), logged_acc.to_bits());

    let pred = pstnet(&["predict", "--checkpoint", "run/best.ckpt", "--input", "data/seq_00000.pcsq"], dir.path());
    assert!(pred.status.success(), "{}", stderr(&pred));
    let pred: serde_json::Value = serde_json::from_slice(&pred.stdout).unwrap();
    assert_eq!(pred["labels"].as_array().unwrap().len(), 3 * 256);
}

#[test]
fn logged_learning_rate_follows_the_step_schedule() {
    let dir = TempDir::new().unwrap();
    tiny_seg_setup(dir.path(), "2");
    let out = pstnet(
        &["train", "--config", "seg.json", "--data", "data", "--epochs", "21", "--batch", "2", "--out", "run"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let mut log = csv::Reader::from_path(dir.path().join("run/metrics.csv")).unwrap();
    let lrs: Vec<(usize, f64)> = log
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[1] == "train")
        .map(|r| (r[0].parse().unwrap(), r[2].parse().unwrap()))
        .collect();
    assert_eq!(lrs[0], (0, 0.01));
    assert_eq!(lrs[10], (10, 0.001));
    assert_eq!(lrs[20], (20, 0.0001));
}

#[test]
fn divergent_training_exits_with_two() {
    let dir = TempDir::new().unwrap();
    tiny_seg_setup(dir.path(), "4");
    let path = dir.path().join("seg.json");
    let mut config: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    config["sgd"]["lr"] = serde_json::json!(1e300);
    fs::write(&path, config.to_string()).unwrap();
    let out = pstnet(
        &["train", "--config", "seg.json", "--data", "data", "--epochs", "3", "--batch", "2", "--out", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("numerical failure"));
    assert!(dir.path().join("run/run.json").exists());
}
