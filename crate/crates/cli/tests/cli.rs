use std::path::Path;
use std::process::{Command, Output};

fn gald(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gald"))
        .args(args)
        .env_remove("GALD_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_train<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "train",
        "--out",
        out,
        "--train-samples",
        "16",
        "--eval-samples",
        "4",
        "--size",
        "32",
        "--channels",
        "4",
    ];
    v.extend_from_slice(extra);
    if !extra.contains(&"--epochs") {
        v.extend(["--epochs", "1"]);
    }
    v
}

#[test]
fn verify_default_passes() {
    let o = gald(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("PASS  dense-equivalence"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn verify_zero_pad_dense_is_expected_fail() {
    let o = gald(&[
        "verify",
        "--border-mode",
        "zero_pad_keys",
        "--check",
        "dense-equivalence",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("XFAIL dense-equivalence"));
}

#[test]
fn unknown_flag_and_check_are_usage_errors() {
    let o = gald(&["verify", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(gald(&["verify", "--check", "nope"]).status.code(), Some(2));
    assert_eq!(gald(&[]).status.code(), Some(2));
}

#[test]
fn gradcheck_registered_ops_pass() {
    let o = gald(&["gradcheck", "conv2d", "--dims", "1,2,5,5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = gald(&[
        "gradcheck",
        "gald_forward",
        "--ga",
        "aspp",
        "--ld",
        "v2",
        "--dims",
        "1,2,4,4",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("max rel err"));
}

#[test]
fn gradcheck_rejects_bad_input() {
    assert_eq!(gald(&["gradcheck", "nosuchop"]).status.code(), Some(2));
    assert_eq!(
        gald(&["gradcheck", "conv2d", "--dims", "1,2,5"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        gald(&["gradcheck", "conv2d", "--dims", "1,0,5,5"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        gald(&["gradcheck", "conv2d", "--dims", "1,64,64,64"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        gald(&["gradcheck", "ldv2_forward", "--k", "4"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn bench_writes_one_row_per_method_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = gald(&[
        "bench",
        "--methods",
        "nonlocal,ldv2",
        "--sizes",
        "8,16,32,64",
        "--runs",
        "1",
        "--warmups",
        "0",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench.json")).unwrap())
            .unwrap();
    assert_eq!(json["seed"], 42);
}

#[test]
fn bench_rejects_crisscross_and_oversized_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        gald(&["bench", "--methods", "crisscross", "--out", out])
            .status
            .code(),
        Some(2)
    );
    let o = gald(&[
        "bench",
        "--methods",
        "nonlocal",
        "--sizes",
        "512",
        "--memory-ceiling-mb",
        "64",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_is_deterministic_and_echoes_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for p in [&a, &b] {
        let o = gald(&tiny_train(p.to_str().unwrap(), &["--seed", "1"]));
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let ra = std::fs::read_to_string(a.join("train_report.json")).unwrap();
    let rb = std::fs::read_to_string(b.join("train_report.json")).unwrap();
    assert_eq!(ra, rb);
    let json: serde_json::Value = serde_json::from_str(&ra).unwrap();
    assert_eq!(json["seed"], 1);
}

#[test]
fn train_zero_epochs_runs_no_steps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = gald(&tiny_train(out, &["--epochs", "0"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("train_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(json["steps"], 0);
    assert_eq!(json["loss_curve"].as_array().unwrap().len(), 0);
}

#[test]
fn train_divergence_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = gald(&tiny_train(out, &["--lr", "1e200", "--grad-clip", "0"]));
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn unwritable_output_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain_file");
    std::fs::write(&file, "x").unwrap();
    let bad = file.join("sub");
    let o = gald(&tiny_train(bad.to_str().unwrap(), &[]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn out_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_gald"))
        .args([
            "train",
            "--epochs",
            "0",
            "--train-samples",
            "8",
            "--eval-samples",
            "2",
            "--size",
            "32",
        ])
        .env("GALD_OUT_DIR", &target)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(Path::new(&target.join("train_report.json")).exists());
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# verify settings\nseed = 7\nchecks = metrics\n").unwrap();
    let c = cfg.to_str().unwrap();
    let o = gald(&["verify", "--config", c]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("seed 7"));
    assert_eq!(text.lines().count(), 2);
    let o = gald(&["verify", "--config", c, "--seed", "3"]);
    assert!(stdout(&o).starts_with("seed 3"));

    std::fs::write(&cfg, "seed = seven\n").unwrap();
    assert_eq!(gald(&["verify", "--config", c]).status.code(), Some(2));
    std::fs::write(&cfg, "sizes = 8\n").unwrap();
    assert_eq!(gald(&["verify", "--config", c]).status.code(), Some(2));
    assert_eq!(
        gald(&["verify", "--config", "/nonexistent/run.cfg"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn invalid_training_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cases: [&[&str]; 5] = [
        &["--ohem", "0"],
        &["--lr", "-1"],
        &["--ld", "v3"],
        &["--size", "16"],
        &["--ld", "v1", "--d", "3"],
    ];
    for extra in cases {
        let o = gald(&tiny_train(out, extra));
        assert_eq!(o.status.code(), Some(2), "{extra:?}: {}", stderr(&o));
    }
}
