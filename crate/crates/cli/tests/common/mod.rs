#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drgate::{generate, DgpSpec};
use serde_json::{json, Value};

pub fn drgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drgate")).args(args).output().expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), String::from_utf8_lossy(&o.stdout), stderr(o));
}

/// Writes a synthetic sample to `dir/data.csv` and returns its path and truth.
pub fn synthetic_csv(dir: &Path, spec: &DgpSpec, seed: u64) -> (PathBuf, drgate::sim::Truth) {
    let (ds, truth) = generate(spec, seed).unwrap();
    let path = dir.join("data.csv");
    ds.write_csv(&path).unwrap();
    (path, truth)
}

/// Run configuration with fast parametric nuisances.
pub fn run_config(data: &Path, moderators: &[&str], extra: Value) -> Value {
    let mut cfg = json!({
        "data": {
            "path": data,
            "columns": { "outcome": "y", "treatment": "d", "moderators": moderators }
        },
        "pipeline": { "learners": { "propensity": ["logit"], "outcome": ["ols"] } },
        "seed": 5
    });
    if let (Some(base), Some(add)) = (cfg.as_object_mut(), extra.as_object()) {
        for (k, v) in add {
            base.insert(k.clone(), v.clone());
        }
    }
    cfg
}

pub fn write_json(path: &Path, value: &Value) -> PathBuf {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_path_buf()
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Column of a CSV file as floats.
pub fn csv_column(path: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].parse().unwrap()).collect()
}
