use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const DATA: &[&str] = &["--dataset", "synth", "--train-size", "120", "--test-size", "60"];
const SYNTH: &[&str] = &["--dataset", "synth", "--train-size", "120", "--test-size", "60", "--arch", "6x5x3"];

fn hemp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hemp"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn hemp")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = hemp(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn train_synth(dir: &Path, out_dir: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--epochs", "3", "--out-dir", out_dir];
    args.extend_from_slice(SYNTH);
    args.extend_from_slice(extra);
    ok(dir, &args)
}

fn field(stdout: &str, key: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("no {key:?} in {stdout:?}"))
        .trim()
        .parse()
        .unwrap()
}

fn last_metrics(path: &Path) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("epoch,"));
    lines.last().unwrap().split(',').map(|v| v.parse().unwrap()).collect()
}

#[test]
fn train_writes_artifacts() {
    let tmp = TempDir::new().unwrap();
    train_synth(tmp.path(), "run", &[]);
    let run = tmp.path().join("run");
    assert!(run.join("model.hemp").metadata().unwrap().len() > 0);
    assert!(run.join("checkpoint.json").exists());
    let rows = fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 4, "header, epoch 0 and three epochs");
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let mut args = vec!["train", "--order", "0", "--out-dir", "x"];
    args.extend_from_slice(SYNTH);
    assert_eq!(hemp(tmp.path(), &args).status.code(), Some(2));
    assert_eq!(hemp(tmp.path(), &["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(hemp(tmp.path(), &["eval"]).status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_3() {
    let tmp = TempDir::new().unwrap();
    let out = hemp(tmp.path(), &["train", "--data-dir", "nowhere", "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let out = hemp(tmp.path(), &["eval", "--model", "missing.hemp", "--dataset", "synth"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn corrupt_container_exits_3() {
    let tmp = TempDir::new().unwrap();
    train_synth(tmp.path(), "run", &[]);
    let path = tmp.path().join("run/model.hemp");
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&path, bytes).unwrap();
    let out = hemp(tmp.path(), &["decompress", "--input", "run/model.hemp"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn container_eval_matches_training_metrics() {
    let tmp = TempDir::new().unwrap();
    train_synth(tmp.path(), "run", &[]);
    let m = last_metrics(&tmp.path().join("run/metrics.csv"));
    let (loss_wq, acc_wq) = (m[2], m[4]);

    let mut args = vec!["eval", "--model", "run/model.hemp"];
    args.extend_from_slice(DATA);
    let from_container = ok(tmp.path(), &args);
    assert!((field(&from_container, "top1") - acc_wq).abs() < 1e-4);
    assert!((field(&from_container, "loss") - loss_wq).abs() < 1e-5);
    let size = fs::metadata(tmp.path().join("run/model.hemp")).unwrap().len();
    assert_eq!(field(&from_container, "bytes"), size as f64);

    // the restored checkpoint evaluates identically
    ok(tmp.path(), &["decompress", "--input", "run/model.hemp", "--out", "restored.json"]);
    args[2] = "restored.json";
    let restored = ok(tmp.path(), &args);
    assert_eq!(field(&restored, "top1"), field(&from_container, "top1"));
    assert_eq!(field(&restored, "loss"), field(&from_container, "loss"));
}

#[test]
fn compress_checkpoint_round_trip() {
    let tmp = TempDir::new().unwrap();
    train_synth(tmp.path(), "run", &[]);
    let out = ok(
        tmp.path(),
        &["compress", "--checkpoint", "run/checkpoint.json", "--levels", "4", "--order", "1", "--out", "c.hemp", "--raw", "c.raw"],
    );
    assert!(out.contains("c.hemp"));
    let raw = fs::read(tmp.path().join("c.raw")).unwrap();
    // 6·5 + 5 + 5·3 + 3 parameters, one byte each, all below N
    assert_eq!(raw.len(), 53);
    assert!(raw.iter().all(|&b| b < 4));
    let listing = ok(tmp.path(), &["decompress", "--input", "c.hemp", "--out", "c.json"]);
    assert!(listing.contains("N=4"), "{listing}");
    assert!(tmp.path().join("c.json").exists());
}

#[test]
fn diagnose_reports_checks() {
    let tmp = TempDir::new().unwrap();
    let out = ok(tmp.path(), &["diagnose", "--params", "64", "--out", "d.csv"]);
    assert!(out.contains("bound:") && out.contains(" 0 violations"), "{out}");
    let csv = fs::read_to_string(tmp.path().join("d.csv")).unwrap();
    assert!(csv.starts_with("kind,order,index,a,b,error\n"));
    assert!(csv.lines().count() > 64);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("run.cfg"), "# small run\nepochs = 2\nlevels = 4\ndeterministic = true\n").unwrap();
    let mut args = vec!["--config", "run.cfg", "train", "--levels", "3", "--out-dir", "cfg"];
    args.extend_from_slice(SYNTH);
    ok(tmp.path(), &args);
    let rows = fs::read_to_string(tmp.path().join("cfg/metrics.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 3, "epochs come from the file");
    let listing = ok(tmp.path(), &["decompress", "--input", "cfg/model.hemp", "--out", "cfg.json"]);
    assert!(listing.contains("N=3") && !listing.contains("N=4"), "{listing}");
}

#[test]
fn deterministic_runs_are_bytewise_identical() {
    let tmp = TempDir::new().unwrap();
    train_synth(tmp.path(), "a", &["--deterministic"]);
    train_synth(tmp.path(), "b", &["--threads", "3"]);
    for f in ["model.hemp", "metrics.csv", "checkpoint.json"] {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}
