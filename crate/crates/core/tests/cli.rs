use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn stcar(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stcar")).args(args).current_dir(dir).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = stcar(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn exit_code(dir: &Path, args: &[&str]) -> i32 {
    stcar(dir, args).status.code().unwrap()
}

const DATA: [&str; 6] =
    ["--records", "data/records.csv", "--adjacency", "data/adjacency.csv", "--sections", "data/sections.csv"];

/// A simulated M4 dataset under `data/` in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["simulate", "--out", "data", "--seed", "3", "--groups", "4,3,3", "--years", "8", "--first-year", "2005"]);
    dir
}

fn with_data<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&DATA);
    v
}

fn csv_rows(path: &Path) -> Vec<HashMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records().map(|rec| headers.iter().map(String::from).zip(rec.unwrap().iter().map(String::from)).collect()).collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Fits M4 at full length, checks convergence and that the true coefficients
/// lie within four posterior sd, then runs the post-processing commands.
#[test]
fn fit_and_post_process() {
    let dir = workspace();
    let root = dir.path();
    let args = with_data(&[
        "fit", "--model", "4", "--chains", "4", "--warmup", "1500", "--samples", "1500", "--seed", "2", "--out", "fit",
    ]);
    let printed = ok(root, &args);
    assert!(printed.contains("summary.csv"), "{printed}");
    for f in ["manifest.json", "summary.csv"] {
        assert!(root.join("fit").join(f).is_file(), "{f}");
    }
    let manifest = json(&root.join("fit/manifest.json"));
    let max_rhat = manifest["max_rhat"].as_f64().unwrap();
    assert!(max_rhat < 1.01, "max R-hat {max_rhat}");

    let truth = json(&root.join("data/truth.json"));
    let summary = csv_rows(&root.join("fit/summary.csv"));
    let row = |name: &str| summary.iter().find(|r| r["parameter"] == name).unwrap_or_else(|| panic!("{name}"));
    let names: Vec<&String> = summary.iter().map(|r| &r["parameter"]).filter(|p| p.starts_with("beta_")).collect();
    assert_eq!(names.len(), 9);
    for (i, name) in names.iter().enumerate() {
        let r = row(name);
        let (mean, sd): (f64, f64) = (r["mean"].parse().unwrap(), r["sd"].parse().unwrap());
        let b = truth["beta"][i].as_f64().unwrap();
        assert!((mean - b).abs() < 4.0 * sd, "{name}: {mean} ± {sd} vs {b}");
    }

    ok(root, &["summarize", "--fit-dir", "fit", "--out", "again"]);
    assert_eq!(fs::read(root.join("fit/summary.csv")).unwrap(), fs::read(root.join("again/summary.csv")).unwrap());

    ok(root, &with_data(&["effects", "--fit-dir", "fit", "--out", "post", "--vary", "marsh", "--grid-size", "5"]));
    let effects = csv_rows(&root.join("post/effects_marsh.csv"));
    assert_eq!(effects.len(), 6 * 5);
    let families: std::collections::BTreeSet<&String> = effects.iter().map(|r| &r["percentile"]).collect();
    assert_eq!(families.len(), 6);

    ok(root, &with_data(&["aggregate", "--fit-dir", "fit", "--out", "post", "--first-year", "2009", "--last-year", "2012"]));
    let agg = csv_rows(&root.join("post/aggregate.csv"));
    assert_eq!(agg.len(), 10);
    assert!(agg.iter().all(|r| r["n_years"] == "4"));

    // Effects against data of another shape are refused.
    ok(root, &["simulate", "--out", "other", "--seed", "4", "--groups", "4,3,3", "--years", "6"]);
    let out = stcar(
        root,
        &["effects", "--fit-dir", "fit", "--records", "other/records.csv", "--adjacency", "other/adjacency.csv", "--sections", "other/sections.csv"],
    );
    assert!(!out.status.success());
}

#[test]
fn cv_ranks_all_five_models() {
    let dir = workspace();
    let root = dir.path();
    let args = with_data(&[
        "cv", "--models", "1,2,3a,3b,4", "--chains", "2", "--warmup", "200", "--samples", "200", "--out", "cv",
        "--parameterization", "auto",
    ]);
    ok(root, &args);
    let summary = json(&root.join("cv/cv_summary.json"));
    assert_eq!(summary["holdout_year"], 2012);
    assert_eq!(summary["ranking"].as_array().unwrap().len(), 5);
    let report = csv_rows(&root.join("cv/cv_report.csv"));
    assert_eq!(report.len(), 5 * 10);
    for m in summary["models"].as_array().unwrap() {
        let cov = m["coverage"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&cov));
        assert_eq!(m["n_evaluated"], 10);
    }
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = workspace();
    let root = dir.path();
    let config = r#"{
        "model": "1",
        "records": "data/records.csv",
        "adjacency": "data/adjacency.csv",
        "sections": "data/sections.csv",
        "out_dir": "from_config",
        "sampler": {"n_chains": 2, "warmup_iters": 100, "sampling_iters": 100}
    }"#;
    fs::write(root.join("run.json"), config).unwrap();
    ok(root, &["--config", "run.json", "fit", "--model", "2", "--samples", "150"]);
    let manifest = json(&root.join("from_config/manifest.json"));
    assert_eq!(manifest["spec"]["variant"], "M2");
    assert_eq!(manifest["sampler"]["n_chains"], 2);
    let chain = fs::read_dir(root.join("from_config"))
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.file_name().to_string_lossy().starts_with("chain"))
        .unwrap();
    let draws = csv::Reader::from_path(chain.path()).unwrap().records().count();
    assert_eq!(draws, 150);
}

#[test]
fn exit_codes() {
    let dir = workspace();
    let root = dir.path();
    assert_eq!(exit_code(root, &["fit", "--no-such-flag"]), 2);
    assert_eq!(exit_code(root, &["fit"]), 2, "missing --records");
    assert_eq!(exit_code(root, &["--config", "absent.json", "fit"]), 2);
    fs::write(root.join("bad.json"), "{\"colour\": 1}").unwrap();
    assert_eq!(exit_code(root, &["--config", "bad.json", "fit"]), 2);
    assert_eq!(exit_code(root, &["aggregate", "--first-year", "2009"]), 2);

    let records = fs::read_to_string(root.join("data/records.csv")).unwrap();
    let mut lines: Vec<&str> = records.lines().collect();
    let broken = lines[1].replacen(',', ",x", 2);
    lines[1] = &broken;
    fs::write(root.join("data/records.csv"), lines.join("\n")).unwrap();
    let out = stcar(root, &with_data(&["fit", "--chains", "2", "--warmup", "10", "--samples", "10"]));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}
