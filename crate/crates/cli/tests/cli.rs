use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn cellseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellseg")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json summary")
}

fn write_config(dir: &Path, extra: Value) -> String {
    let mut cfg = json!({
        "data_root": dir.join("data"),
        "synthetic_suite": { "image_size": 16, "sample_count": 4, "seed": 2, "domains": ["discs", "ellipses", "rings"] },
        "base_width": 4,
        "depth": 2,
        "methods": ["ML_FULL", "TRANSFER"],
        "k_grid": [1],
        "repeats": 2,
        "meta": { "outer_iterations": 2, "k": 2, "inner_steps": 1 },
        "finetune": { "epochs": 2, "tile_size": 16 },
        "crop": { "size": 16 },
        "output_dir": dir.join("out"),
        "checkpoint_every": 1,
        "seed": 5
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn full_pipeline_writes_the_documented_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, json!({}));
    let out = d.join("out");

    let gen = stdout_json(&cellseg(d, &["synth-gen", "--config", &cfg]));
    assert_eq!(gen["domains"].as_array().unwrap().len(), 3);
    assert!(d.join("data/discs/manifest.json").exists());

    let first = stdout_json(&cellseg(d, &["prepare-data", "--config", &cfg]));
    let second = stdout_json(&cellseg(d, &["prepare-data", "--config", &cfg]));
    assert_eq!(first["written"], true);
    assert_eq!(second["written"], false);
    assert_eq!(first["sha256"], second["sha256"]);

    stdout_json(&cellseg(d, &["meta-train", "--config", &cfg]));
    assert!(out.join("ckpt/meta.ckpt").exists());
    assert_eq!(fs::read_to_string(out.join("meta_log.jsonl")).unwrap().lines().count(), 2);
    stdout_json(&cellseg(d, &["transfer-train", "--config", &cfg]));
    assert!(out.join("ckpt/transfer.ckpt").exists());

    let ckpt = out.join("ckpt/meta.ckpt").to_string_lossy().into_owned();
    let ft = stdout_json(&cellseg(
        d,
        &["fine-tune", "--config", &cfg, "--checkpoint", &ckpt, "--target", "rings", "-k", "1"],
    ));
    assert_eq!(ft["shot_ids"].as_array().unwrap().len(), 1);
    let ev = stdout_json(&cellseg(
        d,
        &["evaluate", "--config", &cfg, "--checkpoint", &ckpt, "--target", "rings", "-k", "1"],
    ));
    assert_eq!(ev["images"], 3);
    let iou = ev["mean_iou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&iou));

    let run = stdout_json(&cellseg(d, &["run-protocol", "--config", &cfg]));
    assert_eq!(run["results"], 6);
    assert_eq!(run["complete"], true);
    assert_eq!(fs::read_to_string(out.join("results.jsonl")).unwrap().lines().count(), 6);
    assert_eq!(fs::read_to_string(out.join("summary.csv")).unwrap().lines().count(), 7);
    for t in ["discs", "ellipses", "rings"] {
        assert!(out.join(format!("plots/{t}.png")).exists());
    }
    assert!(out.join("ckpt").is_dir());

    fs::remove_dir_all(out.join("plots")).unwrap();
    let rep = stdout_json(&cellseg(d, &["report", "--config", &cfg]));
    assert_eq!(rep["plots"].as_array().unwrap().len(), 4);
}

#[test]
fn seed_and_output_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, json!({ "methods": ["TRANSFER"] }));
    let run = |out: &str, seed: &str| {
        stdout_json(&cellseg(d, &["run-protocol", "--config", &cfg, "--output", out, "--seed", seed]));
        fs::read_to_string(d.join(out).join("summary.csv")).unwrap()
    };
    let a = run("a", "1");
    assert_eq!(a, run("b", "1"));
    assert_ne!(a, run("c", "2"));
    let stored: Value = serde_json::from_str(&fs::read_to_string(d.join("c/config.json")).unwrap()).unwrap();
    assert_eq!(stored["seed"], 2);
}

#[test]
fn interrupted_protocol_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, json!({}));
    let part = stdout_json(&cellseg(d, &["run-protocol", "--config", &cfg, "--max-cells", "2"]));
    assert_eq!(part["complete"], false);
    let done = stdout_json(&cellseg(d, &["run-protocol", "--config", &cfg, "--resume"]));
    assert_eq!(done["complete"], true);
    let resumed = fs::read_to_string(d.join("out/summary.csv")).unwrap();
    stdout_json(&cellseg(d, &["run-protocol", "--config", &cfg, "--output", "fresh"]));
    assert_eq!(resumed, fs::read_to_string(d.join("fresh/summary.csv")).unwrap());
}

#[test]
fn grid_search_flags_set_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(
        d,
        json!({ "grid_search": { "alpha_grid": [0.0], "beta_grid": [0.0], "outer_iterations": 1, "repeats": 1 } }),
    );
    let out = stdout_json(&cellseg(d, &["grid-search", "--config", &cfg, "--alpha", "0,0.1", "--beta", "0,0.01,0.1"]));
    assert_eq!(out["rows"], 6);
    assert_eq!(fs::read_to_string(d.join("out/grid_search.csv")).unwrap().lines().count(), 7);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, json!({}));
    let code = |args: &[&str]| cellseg(d, args).status.code();

    assert_eq!(code(&["report", "--config", "missing.json"]), Some(2));
    assert_eq!(code(&["run-protocol", "--config", &cfg, "--device", "cuda"]), Some(2));
    assert_eq!(code(&["no-such-command"]), Some(2));
    let empty = write_config(d, json!({ "methods": [] }));
    assert_eq!(code(&["run-protocol", "--config", &empty]), Some(2));

    let on_disk = write_config(d, json!({ "synthetic_suite": null, "domains": [{ "domain_id": "absent" }] }));
    assert_eq!(code(&["meta-train", "--config", &on_disk]), Some(3));
    assert_eq!(code(&["report", "--config", &cfg, "--output", "nothing-here"]), Some(3));

    let diverging =
        write_config(d, json!({ "meta": { "outer_iterations": 3, "k": 2, "inner_steps": 3, "inner_lr": 1e308 } }));
    let out = cellseg(d, &["meta-train", "--config", &diverging]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
