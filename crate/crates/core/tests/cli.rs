use std::path::Path;
use std::process::{Command, Output};

fn tfbest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfbest"))
        .args(args)
        .env("TFBEST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = tfbest(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_MODEL: [&str; 8] = ["--d-model", "16", "--heads", "2", "--enc-layers", "1", "--d-ff", "16"];

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    ok(&["synth", "--drives", "50", "--features", "16", "--seed", "7", "--out", s(&a)]);
    ok(&["synth", "--drives", "50", "--features", "16", "--seed", "7", "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let meta = std::fs::read_to_string(dir.path().join("a.csv.meta.json")).unwrap();
    assert!(meta.contains("\"root_seed\": 7"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&["synth", "--drives", "30", "--features", "4", "--seed", "3", "--out", s(&p("logs.csv"))]);
    ok(&["prepare", "--input", s(&p("logs.csv")), "--out-dir", s(&p("ds"))]);
    for f in ["train.ndjson", "val.ndjson", "test.ndjson", "meta.json"] {
        assert!(p("ds").join(f).exists(), "{f}");
    }

    let (ds, run1, run2) = (p("ds"), p("run1"), p("run2"));
    let mut train = vec!["train", "--variant", "tfbest", "--epochs", "5", "--data", s(&ds)];
    train.extend(SMALL_MODEL);
    let mut first = train.clone();
    first.extend(["--out-dir", s(&run1)]);
    ok(&first);
    let report = std::fs::read_to_string(p("run1").join("train_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 6, "{report}");
    let ckpt = p("run1").join("model.ckpt");
    assert!(ckpt.exists());

    // Same seed, same bytes.
    let mut second = train.clone();
    second.extend(["--out-dir", s(&run2)]);
    ok(&second);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(p("run2").join("model.ckpt")).unwrap());

    ok(&["eval", "--data", s(&p("ds")), "--checkpoint", s(&ckpt), "--out-dir", s(&p("ev"))]);
    let rep = std::fs::read_to_string(p("ev").join("report.csv")).unwrap();
    assert!(rep.starts_with("serial,true_rul,n,point_estimate,std_error,ci_low,ci_high\n"));
    let trace = std::fs::read_to_string(p("ev").join("trace.csv")).unwrap();
    assert!(trace.starts_with("serial,day,true_rul,predicted_rul\n"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("ev").join("summary.json")).unwrap()).unwrap();
    for k in ["test_rmse", "n_drives", "n_windows"] {
        assert!(summary.get(k).is_some(), "{k}");
    }

    let out = tfbest(&["report", "--input", s(&p("ev").join("report.csv"))]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("±"));

    // A dataset with a different feature count is a config mismatch.
    ok(&["synth", "--drives", "30", "--features", "5", "--seed", "3", "--out", s(&p("wide.csv"))]);
    ok(&["prepare", "--input", s(&p("wide.csv")), "--out-dir", s(&p("wide"))]);
    let out = tfbest(&["eval", "--data", s(&p("wide")), "--checkpoint", s(&ckpt), "--out-dir", s(&p("ev2"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error[config-mismatch]"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn usage_errors() {
    assert_eq!(tfbest(&["train"]).status.code(), Some(1));
    assert_eq!(tfbest(&["nonsense"]).status.code(), Some(1));
    let out = tfbest(&["prepare", "--input", "x.csv", "--out-dir", "y", "--train-start", "yesterday"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = tfbest(&["prepare", "--input", s(&missing), "--columns", "smart_5_raw", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_shows_reference_defaults() {
    let out = tfbest(&["train", "--help"]);
    let help = String::from_utf8_lossy(&out.stdout);
    for d in ["[default: 64]", "[default: 4]", "[default: 2]", "[default: 1]", "[default: 0.1]", "[default: 0.001]", "[default: 100]", "256"] {
        assert!(help.contains(d), "{d}");
    }
}

#[test]
fn gradcheck_command_passes() {
    let out = tfbest(&["gradcheck"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 14);
    assert!(text.lines().all(|l| l.ends_with(" ok")), "{text}");
}
