//! End-to-end runs of the `lindistill` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lindistill::experiments::ResultTable;
use serde_json::Value;
use tempfile::TempDir;

fn lindistill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lindistill"))
        .args(args)
        .env_remove("LINDISTILL_MNIST_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs a command that must succeed and returns its output directory.
fn run_ok(tmp: &TempDir, name: &str, args: &[&str]) -> PathBuf {
    let out_dir = tmp.path().join(name);
    let mut full = args.to_vec();
    full.extend(["--out", path(&out_dir)]);
    let out = lindistill(&full);
    assert_eq!(code(&out), 0, "{args:?} failed: {}", stderr(&out));
    out_dir
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn csv_rows(file: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(file)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

#[test]
fn missing_config_exits_2_without_artifacts() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("run");
    let missing = tmp.path().join("nope.toml");
    let out = lindistill(&["train", "--config", path(&missing), "--out", path(&out_dir)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nope.toml"));
    assert!(!out_dir.exists());
}

#[test]
fn unknown_field_exits_2_naming_it() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", "[task]\nkapa = 2.0\n");
    let out_dir = tmp.path().join("run");
    let out = lindistill(&[
        "closed-form",
        "--config",
        path(&cfg),
        "--out",
        path(&out_dir),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("kapa"), "{}", stderr(&out));
    assert!(!out_dir.exists());
}

#[test]
fn bad_arguments_are_usage_errors() {
    assert_eq!(code(&lindistill(&["experiment", "nonsense"])), 2);
    assert_eq!(code(&lindistill(&["train", "--seed", "x"])), 2);
}

#[test]
fn shallow_trace_loss_never_increases() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "t.toml",
        "n = 8\n[task]\ndim = 12\n[trainer]\nrecord_stride = 1\n",
    );
    let dir = run_ok(&tmp, "train", &["train", "--config", path(&cfg)]);
    let losses: Vec<f64> = csv_rows(&dir.join("trace.csv"))
        .iter()
        .map(|r| r[1].parse().unwrap())
        .collect();
    assert!(losses.len() > 10);
    assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    let m = manifest(&dir);
    assert_eq!(
        m["outputs"],
        serde_json::json!(["weights.csv", "trace.csv"])
    );
    assert_eq!(csv_rows(&dir.join("weights.csv")).len(), 12);
}

#[test]
fn deep_run_records_initialisation() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "d.toml", "depth = 3\nn = 20\n[task]\ndim = 8\n");
    let dir = run_ok(&tmp, "deep", &["train", "--config", path(&cfg)]);
    let r = &manifest(&dir)["results"];
    let bound = r["init_scale_bound"].as_f64().unwrap();
    let scale = r["init_scale"].as_f64().unwrap();
    assert!(bound > 0.0);
    assert!((scale - 0.5 * bound).abs() <= 1e-15 * bound);
    assert!(r["epsilon"].as_f64().unwrap() > 0.0);
    assert!(r["final_loss"].as_f64().unwrap() < 1e-6);
}

#[test]
fn bound_examples() {
    let tmp = TempDir::new().unwrap();
    let dir = run_ok(&tmp, "poly", &["bound"]);
    let rows = csv_rows(&dir.join("bound.csv"));
    assert_eq!(&rows[0][0], "optimum");
    let value: f64 = rows[0][5].parse().unwrap();
    assert!(value <= 0.53125, "{value}");
    for r in &rows[1..] {
        assert!(value <= r[5].parse::<f64>().unwrap());
    }
    assert_eq!(&rows[1][7], "true");

    let cfg = write(tmp.path(), "z.toml", "n = 30\nexact_zero = true\n");
    let dir = run_ok(&tmp, "zero", &["bound", "--config", path(&cfg)]);
    assert_eq!(
        manifest(&dir)["results"]["optimum"]["value"].as_f64(),
        Some(0.0)
    );

    let cfg = write(
        tmp.path(),
        "a.toml",
        "[approx]\nepsilon = 0.6\nw_hat_norm = 1.0\n",
    );
    let out = lindistill(&[
        "bound",
        "--config",
        path(&cfg),
        "--out",
        path(&tmp.path().join("a")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("epsilon"));
}

#[test]
fn curve_bounds_need_a_monotone_curve() {
    let tmp = TempDir::new().unwrap();
    let good = write(
        tmp.path(),
        "good.csv",
        "theta,p\n0,1\n0.8,0.4\n1.5707963267948966,0\n",
    );
    let cfg = write(
        tmp.path(),
        "g.toml",
        &format!("n = 4\n[p]\nkind = \"curve\"\npath = {:?}\n", path(&good)),
    );
    run_ok(&tmp, "good", &["bound", "--config", path(&cfg)]);

    let bad = write(
        tmp.path(),
        "bad.csv",
        "theta,p\n0,1\n0.8,0.4\n1.0,0.6\n1.5707963267948966,0\n",
    );
    let cfg = write(
        tmp.path(),
        "b.toml",
        &format!("[p]\nkind = \"curve\"\npath = {:?}\n", path(&bad)),
    );
    let out_dir = tmp.path().join("bad");
    let out = lindistill(&["bound", "--config", path(&cfg), "--out", path(&out_dir)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("non-increasing"), "{}", stderr(&out));
    assert!(!out_dir.exists());
}

const SMALL_GEOMETRY: &str =
    "kappas = [1.0, 4.0]\ndim = 30\nn = 5\ntrials = 4\nmc_samples = 2000\n";

#[test]
fn experiment_csv_round_trips_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "g.toml", SMALL_GEOMETRY);
    let args = ["experiment", "geometry", "--config", path(&cfg), "--plot"];
    let a = run_ok(&tmp, "a", &args);
    let b = run_ok(&tmp, "b", &args);
    let text_a = fs::read(a.join("results.csv")).unwrap();
    assert_eq!(text_a, fs::read(b.join("results.csv")).unwrap());
    assert_eq!(
        fs::read(a.join("plot.svg")).unwrap(),
        fs::read(b.join("plot.svg")).unwrap()
    );
    let table = ResultTable::read_csv(text_a.as_slice()).unwrap();
    assert_eq!(table.to_csv_string().unwrap().as_bytes(), text_a.as_slice());
    assert_eq!(manifest(&a)["config_sha256"], manifest(&b)["config_sha256"]);

    // The manifest reproduces the run.
    let m = a.join("manifest.json");
    let c = run_ok(&tmp, "c", &["experiment", "geometry", "--config", path(&m)]);
    assert_eq!(text_a, fs::read(c.join("results.csv")).unwrap());
}

#[test]
fn svg_has_one_series_group_per_summary() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "g.toml", SMALL_GEOMETRY);
    let dir = run_ok(
        &tmp,
        "g",
        &["experiment", "geometry", "--config", path(&cfg), "--plot"],
    );
    let svg = fs::read_to_string(dir.join("plot.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let groups = doc
        .descendants()
        .filter(|n| n.has_tag_name("g") && n.attribute("class") == Some("series"))
        .count();
    let table =
        ResultTable::read_csv(fs::read(dir.join("results.csv")).unwrap().as_slice()).unwrap();
    assert_eq!(groups, table.summaries().count());
    assert_eq!(groups, 2);
}

#[test]
fn plot_outside_experiments_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("p");
    assert_eq!(
        code(&lindistill(&["bound", "--plot", "--out", path(&out_dir)])),
        2
    );
}

#[test]
fn config_hash_ignores_key_order() {
    let tmp = TempDir::new().unwrap();
    let a = write(
        tmp.path(),
        "a.toml",
        "n = 3\nseed = 5\n[task]\ndim = 7\nkind = \"gaussian\"\n",
    );
    let b = write(
        tmp.path(),
        "b.toml",
        "seed = 5\nn = 3\n[task]\nkind = \"gaussian\"\ndim = 7\n",
    );
    let da = run_ok(&tmp, "a", &["closed-form", "--config", path(&a)]);
    let db = run_ok(&tmp, "b", &["closed-form", "--config", path(&b)]);
    assert_eq!(
        manifest(&da)["config_sha256"],
        manifest(&db)["config_sha256"]
    );
    let dc = run_ok(
        &tmp,
        "c",
        &["closed-form", "--config", path(&a), "--seed", "6"],
    );
    assert_ne!(
        manifest(&da)["config_sha256"],
        manifest(&dc)["config_sha256"]
    );
    assert_eq!(manifest(&dc)["seed"], 6);
}

#[test]
fn rerun_into_same_directory_keeps_one_manifest() {
    let tmp = TempDir::new().unwrap();
    run_ok(&tmp, "same", &["closed-form"]);
    let dir = run_ok(&tmp, "same", &["closed-form", "--seed", "1"]);
    let names: Vec<String> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".json")).count(), 1);
    assert!(names.iter().all(|n| !n.ends_with(".tmp")));
    let m = manifest(&dir);
    assert_eq!(m["seed"], 1);
    assert_eq!(m["command"], "closed-form");
    for key in [
        "schema",
        "tool",
        "version",
        "started_at",
        "finished_at",
        "config",
        "warnings",
    ] {
        assert!(m.get(key).is_some(), "manifest lacks {key}");
    }
}

#[test]
fn bias_falls_back_to_synthetic_and_rejects_incomplete_mnist() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "b.toml",
        "deltas = [0.0, 5.0]\nn = 5\ntrials = 3\nmc_samples = 2000\nsynthetic_dim = 20\n",
    );
    let dir = run_ok(&tmp, "syn", &["experiment", "bias", "--config", path(&cfg)]);
    let m = manifest(&dir);
    assert_eq!(m["results"]["data_source"], "synthetic");
    assert!(m["warnings"]
        .as_array()
        .unwrap()
        .iter()
        .any(|w| w.as_str().unwrap().contains("synthetic")));

    let empty = tmp.path().join("mnist");
    fs::create_dir(&empty).unwrap();
    let out_dir = tmp.path().join("mn");
    let out = lindistill(&[
        "experiment",
        "bias",
        "--config",
        path(&cfg),
        "--mnist-dir",
        path(&empty),
        "--out",
        path(&out_dir),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("MNIST"));
    assert!(!out_dir.exists());
}

#[test]
fn verify_passes_and_writes_report() {
    let tmp = TempDir::new().unwrap();
    let dir = run_ok(&tmp, "v", &["verify", "--cases", "30"]);
    let rows = csv_rows(&dir.join("verify.csv"));
    assert!(rows.len() >= 10);
    assert!(rows.iter().all(|r| &r[1] == "PASS"));
    assert_eq!(manifest(&dir)["failures"], 0);
}
