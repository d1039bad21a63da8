//! End-to-end runs of the `laflow` binary on small configurations.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{read_json, validate};

const BIN: &str = env!("CARGO_BIN_EXE_laflow");

fn laflow(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).trim_end().to_string()
}

fn assert_error_line(out: &Output, kind: &str) {
    let err = stderr_line(out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error: kind={kind}; message=")), "{err}");
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}", stderr_line(out));
}

fn manifest_ok(dir: &Path, subcommand: &str) -> serde_json::Value {
    let m = read_json(&dir.join("manifest.json"));
    validate(&m, "manifest").unwrap();
    assert_eq!(m["subcommand"], subcommand);
    assert_eq!(m["status"], "ok");
    for name in m["artifacts"].as_array().unwrap() {
        assert!(dir.join(name.as_str().unwrap()).is_file(), "{name}");
    }
    m
}

const SMALL_DESK: [&str; 6] = ["--n", "400", "--features", "4", "--classes", "3"];

#[test]
fn mc_grid_is_deterministic_and_schema_valid() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&laflow(&["mc-grid", "--grid", "6", "--repeats", "3", "--out", dir.to_str().unwrap()]));
    }
    for name in ["mc_error.csv", "probit_error.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let m = manifest_ok(&a, "mc-grid");
    assert_eq!(m["seeds"], serde_json::json!([0]));
    validate(&read_json(&a.join("summary.json")), "mc_grid").unwrap();
    let rows = std::fs::read_to_string(a.join("mc_error.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 36);
    assert!(rows.starts_with("m,s,reference,mc_mean_error,mc_max_error"));
}

#[test]
fn bad_range_fails_with_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = laflow(&["mc-grid", "--s-range", "0,1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_error_line(&out, "invalid_argument");
    let m = read_json(&tmp.path().join("manifest.json"));
    validate(&m, "manifest").unwrap();
    assert_eq!(m["status"], "failed");
    assert_eq!(m["error"]["kind"], "invalid_argument");
}

#[test]
fn unknown_method_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = laflow(&["compare", "--methods", "la,bogus", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_error_line(&out, "usage");
    assert!(stderr_line(&out).contains("bogus"));
}

#[test]
fn missing_data_file_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.csv");
    let out = laflow(&["refine", "--data", missing.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_line(&out);
    assert!(err.starts_with("error: kind=") && err.lines().count() == 1, "{err}");
    assert_eq!(read_json(&tmp.path().join("o/manifest.json"))["status"], "failed");
}

#[test]
fn zero_epoch_refine_reproduces_the_base() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut args = vec!["refine", "--epochs", "0", "--out", dir.to_str().unwrap()];
    args.extend(SMALL_DESK);
    ok(&laflow(&args));
    manifest_ok(dir, "refine");
    let res = read_json(&dir.join("results.json"));
    validate(&res, "refine").unwrap();
    for key in ["nll", "ece", "brier", "accuracy"] {
        let (b, r) = (res["base_metrics"][key].as_f64().unwrap(), res["refined_metrics"][key].as_f64().unwrap());
        assert!((b - r).abs() < 1e-9, "{key}: {b} vs {r}");
    }
    assert!(dir.join("base_posterior.json").is_file() && dir.join("refined_posterior.json").is_file());
}

#[test]
fn refine_accepts_a_saved_posterior() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let mut args = vec!["refine", "--epochs", "0", "--out", first.to_str().unwrap()];
    args.extend(SMALL_DESK);
    ok(&laflow(&args));
    let second = tmp.path().join("second");
    let base = first.join("base_posterior.json");
    let mut args = vec!["refine", "--epochs", "2", "--in-posterior", base.to_str().unwrap(), "--out", second.to_str().unwrap()];
    args.extend(SMALL_DESK);
    ok(&laflow(&args));
    let a = read_json(&first.join("results.json"));
    let b = read_json(&second.join("results.json"));
    assert_eq!(a["base_metrics"], b["base_metrics"]);
    // the initial evaluation plus one per epoch
    assert_eq!(b["trace"]["epoch_elbo"].as_array().unwrap().len(), 3);
}

#[test]
fn compare_writes_one_row_per_method_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut args = vec!["compare", "--methods", "map,la,la-refine-2", "--seed", "3,4", "--out", dir.to_str().unwrap()];
    args.extend(SMALL_DESK);
    ok(&laflow(&args));
    let m = manifest_ok(dir, "compare");
    assert_eq!(m["seeds"], serde_json::json!([3, 4]));
    let res = read_json(&dir.join("results.json"));
    validate(&res, "compare").unwrap();
    assert_eq!(res["rows"].as_array().unwrap().len(), 6);
    let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "method,seed,s,nll,ece,brier,accuracy,mmd,fpr95");
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn ablation_and_ood_are_schema_valid() {
    let tmp = tempfile::tempdir().unwrap();
    let abl = tmp.path().join("abl");
    let mut args = vec!["ablate-flow", "--lengths", "1,2", "--out", abl.to_str().unwrap()];
    args.extend(SMALL_DESK);
    ok(&laflow(&args));
    manifest_ok(&abl, "ablate-flow");
    let res = read_json(&abl.join("results.json"));
    validate(&res, "ablate_flow").unwrap();
    assert_eq!(res["rows"].as_array().unwrap().len(), 4);

    let ood = tmp.path().join("ood");
    let mut args = vec!["ood", "--methods", "map,la", "--out", ood.to_str().unwrap()];
    args.extend(SMALL_DESK);
    ok(&laflow(&args));
    manifest_ok(&ood, "ood");
    validate(&read_json(&ood.join("results.json")), "ood").unwrap();
}

#[test]
fn single_cell_with_many_draws_is_accurate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&laflow(&[
        "mc-grid", "--grid", "1", "--repeats", "1", "--s-samples", "10000000", "--m-range", "1,1", "--s-range", "2,2",
        "--out", dir.to_str().unwrap(),
    ]));
    let summary = read_json(&dir.join("summary.json"));
    let err = summary["max_mc_error"]["value"].as_f64().unwrap();
    assert!(err < 1e-3, "{err}");
}
