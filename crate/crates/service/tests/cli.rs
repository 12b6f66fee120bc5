mod support;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use support::separable_request;

fn arbor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arbor")).args(args).output().unwrap()
}

fn text(o: &Output) -> (String, String) {
    (String::from_utf8_lossy(&o.stdout).into(), String::from_utf8_lossy(&o.stderr).into())
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, v.to_string()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the separable fixture and returns (model path, record path).
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let req = write_json(dir, "train.json", &separable_request());
    let model = dir.join("model.json");
    let o = arbor(&["train", "--request", s(&req), "--out", s(&model)]);
    assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["training_accuracy"], 1.0);
    let record = write_json(dir, "record.json", &json!({"x": 2, "flag": true}));
    (model, record)
}

#[test]
fn query_prints_the_answer_and_the_verbalized_trace() {
    let dir = tempfile::tempdir().unwrap();
    let (model, record) = trained(dir.path());
    let o = arbor(&["query", "--model", s(&model), "--record", s(&record)]);
    assert_eq!(o.status.code(), Some(0));
    let (out, _) = text(&o);
    assert!(out.starts_with("answer: low\n"), "{out}");
    assert!(out.contains("status: answered"));
    assert!(out.contains("verdict: low"));
    assert!(out.lines().any(|l| l.contains('x') && l.contains("4.5")), "{out}");
}

#[test]
fn schema_and_csv_train_the_same_model() {
    let dir = tempfile::tempdir().unwrap();
    let req = separable_request();
    let schema = write_json(dir.path(), "schema.json", &req["schema"]);
    let mut csv = String::from("x,flag,y\n");
    for r in req["rows"].as_array().unwrap() {
        csv.push_str(&format!("{},{},{}\n", r["x"], r["flag"], r["y"].as_str().unwrap()));
    }
    let data = dir.path().join("rows.csv");
    std::fs::write(&data, csv).unwrap();
    let a = dir.path().join("a.json");
    let o = arbor(&["train", "--schema", s(&schema), "--data", s(&data), "--out", s(&a)]);
    assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));
    let (b, _) = trained(dir.path());
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn whatif_reports_the_flip_at_the_root() {
    let dir = tempfile::tempdir().unwrap();
    let (model, record) = trained(dir.path());
    let o = arbor(&["whatif", "--model", s(&model), "--record", s(&record), "--set", "x=7", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["outcome_changed"], true);
    assert_eq!(v["divergence_index"], 0);
    let o = arbor(&["whatif", "--model", s(&model), "--record", s(&record), "--set", "x=3"]);
    assert!(text(&o).0.contains("paths are identical"));
}

#[test]
fn exit_codes_separate_usage_from_domain_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(arbor(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(arbor(&["query", "--model"]).status.code(), Some(2));
    assert_eq!(arbor(&["whatif", "--model", "m", "--record", "r", "--set", "novalue"]).status.code(), Some(2));
    assert_eq!(arbor(&["--help"]).status.code(), Some(0));

    let missing = dir.path().join("absent.json");
    let o = arbor(&["query", "--model", s(&missing), "--record", s(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).1.starts_with("error[io_error]"));

    let mut req = separable_request();
    req["rows"] = json!([]);
    let p = write_json(dir.path(), "empty.json", &req);
    let o = arbor(&["train", "--request", s(&p), "--out", s(&dir.path().join("m.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).1.contains("invalid_dataset"));
}

#[test]
fn bench_with_a_fixed_seed_writes_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = arbor(&["bench", "--seed", "7", "--seeds", "1", "--n", "80", "--arithmetic-n", "10", "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));
        (std::fs::read(out.join("metrics.json")).unwrap(), std::fs::read_to_string(out.join("table.md")).unwrap())
    };
    let (m1, t1) = run("one");
    let (m2, t2) = run("two");
    assert_eq!(m1, m2);
    assert_eq!(t1, t2);
    assert!(t1.contains("| full"));
    let v: Value = serde_json::from_slice(&m1).unwrap();
    assert_eq!(v["spec"]["seeds"], json!([7]));
}

#[test]
fn train_policy_writes_a_checkpoint_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("policy.json");
    let curve = dir.path().join("curve.csv");
    let o = arbor(&["train-policy", "--seed", "3", "--out", s(&ck), "--curve", s(&curve)]);
    assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));
    let p: f64 = text(&o).0.split(['=', ','].as_ref()).nth(1).unwrap().trim().parse().unwrap();
    assert!(p > 0.95, "{p}");
    let v: Value = serde_json::from_slice(&std::fs::read(&ck).unwrap()).unwrap();
    assert_eq!(v["metadata"]["seed"], 3);
    assert_eq!(std::fs::read_to_string(&curve).unwrap().lines().count(), 501);
}

#[test]
fn partial_params_and_categorical_features_train() {
    let dir = tempfile::tempdir().unwrap();
    let req = json!({
        "schema": {
            "features": [{"name": "x", "kind": "numeric"}, {"name": "color", "kind": "categorical", "vocabulary": ["red", "blue"]}],
            "label": {"name": "y", "vocabulary": ["low", "high"]}
        },
        "rows": [{"x": 1, "color": "red", "y": "low"}, {"x": 9, "color": "blue", "y": "high"}],
        "params": {"max_depth": 4}
    });
    let p = write_json(dir.path(), "req.json", &req);
    let o = arbor(&["train", "--request", s(&p), "--out", s(&dir.path().join("m.json"))]);
    assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));
}
