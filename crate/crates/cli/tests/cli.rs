mod common;

use std::fs;

use common::*;
use tokenhier_core::encoder::EncoderConfig;
use tokenhier_core::params::Checkpoint;
use tokenhier_core::raster::Raster;
use tokenhier_core::ssl::{SslConfig, SslState};
use tokenhier_core::tiler::TileManifest;

#[test]
fn tile_512_image_at_256_gives_four_records() {
    let dir = tempfile::tempdir().unwrap();
    write_image(&dir.path().join("in/slide.ppm"), &tissue_image(512));
    let args = ["tile", "--input", "in", "--out", "m.jsonl", "--tile-size", "256", "--min-tissue", "0"];
    let out = ok(dir.path(), &args);
    assert!(stdout(&out).contains("4 tile(s) kept"), "{}", stdout(&out));
    let m = TileManifest::read(&dir.path().join("m.jsonl")).unwrap();
    assert_eq!(m.records.len(), 4);
    let first = fs::read(dir.path().join("m.jsonl")).unwrap();
    ok(dir.path(), &args);
    assert_eq!(first, fs::read(dir.path().join("m.jsonl")).unwrap());
}

#[test]
fn tile_keeps_only_tissue_tiles_by_default() {
    let dir = tempfile::tempdir().unwrap();
    write_image(&dir.path().join("in/slide.ppm"), &tissue_image(512));
    ok(dir.path(), &["tile", "--input", "in", "--out", "m.jsonl"]);
    let m = TileManifest::read(&dir.path().join("m.jsonl")).unwrap();
    assert_eq!(m.records.len(), 1);
    assert_eq!((m.records[0].x, m.records[0].y), (0, 0));
}

#[test]
fn tile_empty_directory_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    let out = ok(dir.path(), &["tile", "--input", "empty", "--out", "m.jsonl"]);
    assert!(stderr(&out).contains("WARN"), "{}", stderr(&out));
    let m = TileManifest::read(&dir.path().join("m.jsonl")).unwrap();
    assert!(m.records.is_empty());
}

#[test]
fn tile_unreadable_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("in")).unwrap();
    fs::write(dir.path().join("in/broken.ppm"), b"P6\n4 4\n255\nxx").unwrap();
    let out = run(dir.path(), &["tile", "--input", "in", "--out", "m.jsonl"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = run(dir.path(), &["tile", "--input", "missing", "--out", "m.jsonl"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn tile_all_degenerate_exits_3_and_partial_skips() {
    let dir = tempfile::tempdir().unwrap();
    write_image(&dir.path().join("in/white.ppm"), &Raster::filled(256, 256, [255, 255, 255]));
    let out = run(dir.path(), &["tile", "--input", "in", "--out", "m.jsonl"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    write_image(&dir.path().join("in/slide.ppm"), &tissue_image(512));
    let out = ok(dir.path(), &["tile", "--input", "in", "--out", "m.jsonl"]);
    assert!(stderr(&out).contains("white.ppm"));
    assert_eq!(TileManifest::read(&dir.path().join("m.jsonl")).unwrap().records.len(), 1);
}

#[test]
fn probe_bogus_mode_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["probe", "--ckpt", "c", "--data", "d", "--mode", "bogus", "--report", "r.json"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("possible values"), "{}", stderr(&out));
}

#[test]
fn posttrain_without_gram_teacher_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["posttrain", "--steps", "1", "--out", "p.ckpt"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--gram-teacher"), "{}", stderr(&out));
    assert!(!dir.path().join("p.ckpt").exists());
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    let out = run(dir.path(), &["pretrain", "--config", "bad.json", "--steps", "0", "--out", "p.ckpt"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    write_json(dir.path(), "neg.json", &serde_json::json!({ "ssl": { "lr": -1.0 } }));
    let out = run(dir.path(), &["pretrain", "--config", "neg.json", "--steps", "0", "--out", "p.ckpt"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn pretrain_zero_steps_is_initialization() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--seed", "3", "pretrain", "--steps", "0", "--out", "init.ckpt"]);
    let ck = Checkpoint::read(&dir.path().join("init.ckpt")).unwrap();
    let init = SslState::new(&EncoderConfig::default(), &SslConfig::default(), 3)
        .unwrap()
        .to_checkpoint()
        .unwrap();
    assert_eq!(ck.kind, "ssl");
    assert_eq!(ck.tensors, init.tensors);
    assert_eq!(ck.meta["step"], 0);
    assert!(ck.meta["config_fingerprint"].is_string());
    assert!(fs::read_to_string(dir.path().join("init.ckpt.losses.jsonl")).unwrap().is_empty());
    let record = read_json(&dir.path().join("init.ckpt.run.json"));
    assert_eq!(record["command"], "pretrain");
    assert_eq!(record["seed"], 3);
}

#[test]
fn gram_column_zero_in_pretrain_nonzero_in_posttrain() {
    let dir = tempfile::tempdir().unwrap();
    write_json(dir.path(), "tiny.json", &tiny_train_config());
    ok(dir.path(), &["pretrain", "--config", "tiny.json", "--steps", "4", "--out", "pre.ckpt"]);
    let pre = loss_log(&dir.path().join("pre.ckpt.losses.jsonl"));
    assert_eq!(pre.len(), 4);
    assert!(column(&pre, "gram").iter().all(|&g| g == 0.0));
    for l in &pre {
        let total = l["total"].as_f64().unwrap();
        let expect = l["dino"].as_f64().unwrap() + l["ibot"].as_f64().unwrap() + 0.1 * l["koleo"].as_f64().unwrap();
        assert!((total - expect).abs() < 1e-12);
    }
    ok(dir.path(), &["posttrain", "--gram-teacher", "pre.ckpt", "--steps", "3", "--out", "post.ckpt"]);
    let post = loss_log(&dir.path().join("post.ckpt.losses.jsonl"));
    assert_eq!(column(&post, "step"), vec![4.0, 5.0, 6.0]);
    let gram = column(&post, "gram");
    assert!(gram.iter().all(|g| g.is_finite()));
    assert!(gram[0] > 0.0, "{gram:?}");
    let ck = Checkpoint::read(&dir.path().join("post.ckpt")).unwrap();
    assert_eq!(ck.meta["phase"], "posttrain");
}

#[test]
fn probe_global_linear_separates() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--kind", "global", "--out", "global", "--per-class", "60"]);
    ok(dir.path(), &["pretrain", "--steps", "0", "--out", "init.ckpt"]);
    ok(
        dir.path(),
        &["probe", "--ckpt", "init.ckpt", "--data", "global", "--mode", "linear", "--report", "r.json"],
    );
    let report = read_json(&dir.path().join("r.json"));
    assert_eq!(schema_errors(&report), Vec::<String>::new());
    assert_eq!(report["kind"], "probe");
    let bacc = report["results"][0]["bacc"].as_f64().unwrap();
    assert!(bacc >= 0.9, "global linear bacc {bacc}");
}

#[test]
fn probe_local_attnpool_beats_linear() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--kind", "local", "--out", "local"]);
    ok(dir.path(), &["pretrain", "--steps", "0", "--out", "init.ckpt"]);
    let bacc = |mode: &str| {
        let report = format!("{mode}.json");
        ok(
            dir.path(),
            &["probe", "--ckpt", "init.ckpt", "--data", "local", "--mode", mode, "--report", &report],
        );
        read_json(&dir.path().join(report))["results"][0]["bacc"].as_f64().unwrap()
    };
    let (linear, attn) = (bacc("linear"), bacc("attnpool"));
    assert!(attn - linear >= 0.3, "attnpool {attn} vs linear {linear}");
}

#[test]
fn probe_single_class_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--kind", "global", "--out", "g", "--per-class", "5"]);
    fs::remove_dir_all(dir.path().join("g/class1")).unwrap();
    ok(dir.path(), &["pretrain", "--steps", "0", "--out", "init.ckpt"]);
    let out = run(dir.path(), &["probe", "--ckpt", "init.ckpt", "--data", "g", "--mode", "linear", "--report", "r.json"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--report", "g.json"]);
    assert!(stdout(&out).contains("ssl.koleo"));
    let out = run(dir.path(), &["gradcheck", "--inject-fault", "heads.attnpool"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("heads.attnpool"), "{}", stderr(&out));
    let out = run(dir.path(), &["gradcheck", "--inject-fault", "nonexistent"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn out_dir_resolves_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--out-dir", "runs/a", "synth", "--kind", "global", "--out", "g", "--per-class", "5"]);
    assert!(dir.path().join("runs/a/g/index.tsv").exists());
    assert!(dir.path().join("runs/a/g/index.tsv.run.json").exists());
}

#[test]
fn augment_writes_views_and_draw_log() {
    let dir = tempfile::tempdir().unwrap();
    write_image(&dir.path().join("in/a.ppm"), &tissue_image(64));
    write_image(&dir.path().join("in/b.ppm"), &tissue_image(32));
    ok(dir.path(), &["augment", "--input", "in", "--out", "aug", "--views", "3", "--space", "lab"]);
    let log = fs::read_to_string(dir.path().join("aug/augment.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["draws"][0]["space"], "lab");
        assert!(dir.path().join("aug").join(v["file"].as_str().unwrap()).exists());
    }
}

#[test]
fn embed_writes_one_line_per_item() {
    let dir = tempfile::tempdir().unwrap();
    write_json(dir.path(), "tiny.json", &tiny_train_config());
    ok(dir.path(), &["synth", "--kind", "global", "--out", "g", "--per-class", "5", "--split", "test"]);
    ok(dir.path(), &["pretrain", "--config", "tiny.json", "--steps", "0", "--out", "t.ckpt"]);
    ok(dir.path(), &["embed", "--ckpt", "t.ckpt", "--data", "g", "--out", "e.jsonl", "--patches"]);
    let text = fs::read_to_string(dir.path().join("e.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!lines.is_empty());
    for l in &lines {
        assert_eq!(l["cls"].as_array().unwrap().len(), 16);
        assert_eq!(l["patches"].as_array().unwrap().len(), 16);
    }
}
