use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn gentn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gentn")).args(args).env("RUST_LOG", "warn").output().expect("spawn gentn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let out = gentn(args);
    assert_eq!(code(&out), 0, "gentn {args:?} failed: {}", stderr(&out));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn onehot(dir: &Path, m: &str, indices: &str) -> PathBuf {
    let out = dir.join(format!("onehot_{}.json", indices.replace(',', "_")));
    ok(&["construct", "onehot", "--M", m, "--indices", indices, "--out", p(&out)]);
    out
}

#[test]
fn verify_small_case_passes() {
    let out = ok(&["verify", "--all", "--M", "3", "--R", "3", "--T", "4", "--trials", "10"]);
    let report = stdout(&out);
    assert!(report.contains("PASS"), "{report}");
    assert!(!report.contains("FAIL"), "{report}");
}

#[test]
fn malformed_config_reports_line_and_column() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\n  \"M\": 10,\n  \"T\": 6,\n  \"ranks\": [1, 2,\n").unwrap();
    let out = gentn(&["experiment", "--config", p(&cfg), "--out-dir", p(&dir.path().join("o"))]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("line") && err.contains("column"), "{err}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"M": 3, "T": 2, "ranks": [1], "trails": 4}"#).unwrap();
    let out = gentn(&["experiment", "--config", p(&cfg), "--out-dir", p(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("trails"), "{}", stderr(&out));
}

#[test]
fn oversized_grid_is_a_capacity_error() {
    let dir = TempDir::new().unwrap();
    let net = dir.path().join("net.json");
    ok(&["construct", "thm2", "--M", "10", "--R", "2", "--T", "10", "--out", p(&net)]);
    let grid = dir.path().join("grid.json");
    let out = gentn(&["grid", "--net", p(&net), "--out", p(&grid)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("capacity"), "{}", stderr(&out));
    assert!(!grid.exists());
}

#[test]
fn max_elements_flag_lowers_the_cap() {
    let dir = TempDir::new().unwrap();
    let net = onehot(dir.path(), "3", "0,1,2");
    let grid = dir.path().join("grid.json");
    let out = gentn(&["--max-elements", "26", "grid", "--net", p(&net), "--out", p(&grid)]);
    assert_eq!(code(&out), 2);
    ok(&["--max-elements", "27", "grid", "--net", p(&net), "--out", p(&grid)]);
}

#[test]
fn roundtrip_is_byte_stable() {
    let dir = TempDir::new().unwrap();
    let net = onehot(dir.path(), "3", "2,0,1");
    let original = fs::read(&net).unwrap();
    let out = ok(&["roundtrip", "--net", p(&net)]);
    assert_eq!(out.stdout, original);
    // the input file is left alone
    assert_eq!(fs::read(&net).unwrap(), original);
}

#[test]
fn roundtrip_canonicalizes_whitespace() {
    let dir = TempDir::new().unwrap();
    let net = onehot(dir.path(), "2", "1,1");
    let canonical = fs::read(&net).unwrap();
    let value: serde_json::Value = serde_json::from_slice(&canonical).unwrap();
    let compact = dir.path().join("compact.json");
    fs::write(&compact, serde_json::to_string(&value).unwrap()).unwrap();
    let out_path = dir.path().join("again.json");
    ok(&["roundtrip", "--net", p(&compact), "--out", p(&out_path)]);
    assert_eq!(fs::read(&out_path).unwrap(), canonical);
}

#[test]
fn missing_xi_is_named() {
    let dir = TempDir::new().unwrap();
    let net = onehot(dir.path(), "2", "0,1");
    let mut value: serde_json::Value = serde_json::from_slice(&fs::read(&net).unwrap()).unwrap();
    value.as_object_mut().unwrap().remove("xi");
    let broken = dir.path().join("broken.json");
    fs::write(&broken, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    let out = gentn(&["roundtrip", "--net", p(&broken)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("`xi`"), "{}", stderr(&out));
}

#[test]
fn onehot_network_evaluates_to_indicator() {
    let dir = TempDir::new().unwrap();
    let net = onehot(dir.path(), "3", "1,2");
    let hit: f64 = stdout(&ok(&["eval", "--net", p(&net), "--seq", "1,2"])).trim().parse().unwrap();
    let miss: f64 = stdout(&ok(&["eval", "--net", p(&net), "--seq", "2,1"])).trim().parse().unwrap();
    assert_eq!((hit, miss), (1.0, 0.0));
}

#[test]
fn pair_detector_rank_bound() {
    let dir = TempDir::new().unwrap();
    let net = dir.path().join("net.json");
    ok(&["construct", "thm2", "--M", "3", "--R", "3", "--T", "4", "--out", p(&net)]);
    let grid = dir.path().join("grid.json");
    ok(&["grid", "--net", p(&net), "--out", p(&grid)]);
    assert!(grid.with_extension("bin").exists());
    let report: serde_json::Value = serde_json::from_str(&stdout(&ok(&["analyze", "rank-bound", p(&grid)]))).unwrap();
    assert_eq!(report["rank"], 9);
    assert_eq!(report["shape"], serde_json::json!([3, 3, 3, 3]));
    let from_net: serde_json::Value =
        serde_json::from_str(&stdout(&ok(&["analyze", "rank-bound", "--net", p(&net)]))).unwrap();
    assert_eq!(from_net, report);
}

#[test]
fn grid_matches_bruteforce_through_files() {
    let dir = TempDir::new().unwrap();
    let a = onehot(dir.path(), "2", "0,1,1");
    let b = onehot(dir.path(), "2", "1,1,0");
    let sum = dir.path().join("sum.json");
    ok(&["construct", "add", "--a", p(&a), "--b", p(&b), "--alpha", "2", "--beta", "-3", "--out", p(&sum)]);
    let fast = dir.path().join("fast.json");
    let slow = dir.path().join("slow.json");
    ok(&["grid", "--net", p(&sum), "--out", p(&fast), "--inline"]);
    ok(&["grid", "--net", p(&sum), "--out", p(&slow), "--inline", "--bruteforce"]);
    let fast: serde_json::Value = serde_json::from_slice(&fs::read(&fast).unwrap()).unwrap();
    let slow: serde_json::Value = serde_json::from_slice(&fs::read(&slow).unwrap()).unwrap();
    assert_eq!(fast, slow);
    assert_eq!(fast["data"][0][1][1], 2.0);
    assert_eq!(fast["data"][1][1][0], -3.0);
    assert_eq!(fast["data"][0][0][0], 0.0);
}

#[test]
fn experiment_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"M": 3, "T": 4, "ranks": [1, 3], "trials": 4, "xi": "rect_max"}"#).unwrap();
    let (o1, o2) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--seed", "7", "experiment", "--config", p(&cfg), "--out-dir", p(&o1)]);
    ok(&["--seed", "7", "--threads", "1", "experiment", "--config", p(&cfg), "--out-dir", p(&o2)]);
    for f in ["histogram.csv", "trials.csv", "summary.json"] {
        assert_eq!(fs::read(o1.join(f)).unwrap(), fs::read(o2.join(f)).unwrap(), "{f}");
    }
    let hist = fs::read_to_string(o1.join("histogram.csv")).unwrap();
    assert!(hist.starts_with("xi,shared,R,bound,count"), "{hist}");
}

#[test]
fn train_writes_metrics_and_networks() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("train.json");
    fs::write(&cfg, r#"{"M": 3, "T": 4, "rank": 2, "n_train": 60, "n_test": 20, "epochs": 3}"#).unwrap();
    let (o1, o2) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", p(&cfg), "--out-dir", p(&o1)]);
    ok(&["train", "--config", p(&cfg), "--out-dir", p(&o2)]);
    let metrics = fs::read_to_string(o1.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4, "{metrics}");
    assert_eq!(metrics, fs::read_to_string(o2.join("metrics.csv")).unwrap());
    for k in 0..2 {
        let net = o1.join(format!("class_{k}.json"));
        assert_eq!(fs::read(&net).unwrap(), fs::read(o2.join(format!("class_{k}.json"))).unwrap());
        ok(&["roundtrip", "--net", p(&net)]);
    }
}

#[test]
fn bad_arguments_exit_with_validation_code() {
    assert_eq!(code(&gentn(&["construct", "onehot", "--M", "3", "--indices", "0,x", "--out", "/dev/null"])), 1);
    assert_eq!(code(&gentn(&["no-such-command"])), 1);
    assert_eq!(code(&gentn(&["--help"])), 0);
}
