#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tokenhier_core::raster::{write_ppm, Raster};

pub const BIN: &str = env!("CARGO_BIN_EXE_tokenhier");

/// Runs the binary in `dir` with a clean thread setting.
pub fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("TOKENHIER_THREADS")
        .env("NO_COLOR", "1")
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Panics with the captured streams unless the command exited 0.
pub fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert_eq!(
        code(&out),
        0,
        "tokenhier {} failed\nstdout:\n{}\nstderr:\n{}",
        args.join(" "),
        stdout(&out),
        stderr(&out)
    );
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Dark tissue square in the top-left quadrant on a white background.
pub fn tissue_image(size: usize) -> Raster {
    Raster::from_fn(size, size, |x, y| {
        if x < size / 2 && y < size / 2 {
            [150, 70, 140]
        } else {
            [240, 240, 240]
        }
    })
}

pub fn write_image(path: &Path, r: &Raster) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    write_ppm(path, r).unwrap();
}

/// Writes `name` with JSON `value` into `dir`.
pub fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Parsed loss-log lines.
pub fn loss_log(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

pub fn column(log: &[serde_json::Value], key: &str) -> Vec<f64> {
    log.iter().map(|l| l[key].as_f64().unwrap()).collect()
}

/// Errors from validating `report` against the shipped report schema.
pub fn schema_errors(report: &serde_json::Value) -> Vec<String> {
    let schema: serde_json::Value = serde_json::from_str(tokenhier_core::bench::REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    validator.iter_errors(report).map(|e| e.to_string()).collect()
}

/// Small encoder and SSL settings for quick end-to-end runs.
pub fn tiny_train_config() -> serde_json::Value {
    serde_json::json!({
        "encoder": { "image_size": 64, "token_size": 16, "embed_dim": 16, "depth": 1, "num_heads": 2, "mlp_ratio": 2.0 },
        "ssl": { "prototype_count": 16, "batch_size": 4 },
        "corpus_size": 8
    })
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}
