use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn stgcn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stgcn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write(dir: &Path, name: &str, value: &Value) {
    fs::write(dir.join(name), serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn synth_config(mode: &str, n: usize, classes: usize) -> Value {
    json!({
        "num_classes": classes,
        "mode": mode,
        "clusters": [4, 3],
        "tracks": [
            {"node_type": "actor", "cluster": 0},
            {"node_type": "object", "cluster": 1}
        ],
        "min_steps": 12,
        "max_steps": 30,
        "min_segment": 3,
        "max_segment": 8,
        "noise": 0.3,
        "num_sequences": n
    })
}

fn model_config(mode: &str, classes: usize) -> Value {
    json!({
        "clusters": [4, 3],
        "node_types": [
            {"node_type": "actor", "cluster": 0},
            {"node_type": "object", "cluster": 1}
        ],
        "d_model": 8,
        "harmonization": "per_cluster",
        "levels": 1,
        "stack_depth": 1,
        "mode": mode,
        "num_classes": classes
    })
}

fn train_config(mode: &str) -> Value {
    json!({"mode": mode, "lr0": 0.01, "sched_step": 1, "sched_drop": 0.9, "epochs": 2, "seed": 0})
}

/// Synthesizes a dataset and trains on it, returning the checkpoint path.
fn trained(dir: &Path, mode: &str, classes: usize) -> String {
    write(dir, "synth.json", &synth_config(mode, 10, classes));
    write(dir, "model.json", &model_config(mode, classes));
    write(dir, "train.json", &train_config(mode));
    let out = stgcn(&["synth", "--config", "synth.json", "--seed", "4", "--out", "data"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = stgcn(
        &[
            "train", "--manifest", "data/manifest.json", "--model-config", "model.json", "--train-config",
            "train.json", "--seed", "1", "--out", "run",
        ],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    "run/final.ckpt.json".into()
}

#[test]
fn synth_writes_every_sequence_and_the_oracle() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = synth_config("single", 20, 5);
    cfg["clusters"] = json!([6, 4]);
    write(tmp.path(), "synth.json", &cfg);
    let out = stgcn(&["synth", "--config", "synth.json", "--seed", "9", "--out", "data"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let data = tmp.path().join("data");
    let stgs = fs::read_dir(&data)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".stgs.json"))
        .count();
    assert_eq!(stgs, 20);
    let oracle: Value = serde_json::from_str(&fs::read_to_string(data.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(oracle["seed"], 9);
    assert_eq!(oracle["subjects"].as_array().unwrap().len(), 20);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let entries = manifest["sequences"].as_array().unwrap();
    assert_eq!(entries.iter().filter(|e| e["split"] == "test").count(), 4);
}

#[test]
fn synth_is_byte_identical_under_a_fixed_seed() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "synth.json", &synth_config("multi", 5, 4));
    for dir in ["a", "b"] {
        let out = stgcn(&["synth", "--config", "synth.json", "--seed", "2", "--out", dir], tmp.path());
        assert_eq!(code(&out), 0);
    }
    let mut names: Vec<_> = fs::read_dir(tmp.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 5);
    for n in names {
        let a = fs::read(tmp.path().join("a").join(&n)).unwrap();
        let b = fs::read(tmp.path().join("b").join(&n)).unwrap();
        assert_eq!(a, b, "{n:?} differs");
    }
}

#[test]
fn synth_refuses_to_overwrite_without_force() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "synth.json", &synth_config("single", 3, 3));
    let args = ["synth", "--config", "synth.json", "--seed", "1", "--out", "data"];
    assert_eq!(code(&stgcn(&args, tmp.path())), 0);
    assert_eq!(code(&stgcn(&args, tmp.path())), 2);
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&stgcn(&forced, tmp.path())), 0);
}

#[test]
fn synth_rejects_an_invalid_config() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = synth_config("single", 3, 3);
    cfg["min_steps"] = json!(40);
    write(tmp.path(), "synth.json", &cfg);
    let out = stgcn(&["synth", "--config", "synth.json", "--seed", "1", "--out", "data"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn seed_is_mandatory_for_synth_and_train() {
    let tmp = TempDir::new().unwrap();
    assert_ne!(code(&stgcn(&["synth", "--config", "x.json", "--out", "d"], tmp.path())), 0);
    assert_ne!(code(&stgcn(&["train", "--manifest", "m.json", "--preset", "cad120", "--out", "r"], tmp.path())), 0);
}

#[test]
fn ingest_actor_only_table() {
    let tmp = TempDir::new().unwrap();
    let table = json!({
        "num_classes": 4,
        "segment_labels": [0, 2, 1],
        "nodes": [{"id": "actor", "node_type": "actor", "features": [vec![0.5f32; 630], vec![0.1f32; 630], vec![-0.2f32; 630]]}]
    });
    write(tmp.path(), "table.json", &table);
    let out = stgcn(&["ingest", "--table", "table.json", "--out", "seqs", "--name", "video"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("seqs/video.stgs.json")).unwrap()).unwrap();
    assert_eq!(m["num_steps"], 3);
    assert_eq!(m["tracks"].as_array().unwrap().len(), 1);
    assert_eq!(m["clusters"][0]["feature_len"], 630);
}

#[test]
fn ingest_rejects_negative_edge_weights() {
    let tmp = TempDir::new().unwrap();
    let table = json!({
        "num_classes": 2,
        "segment_labels": [0, 1],
        "nodes": [
            {"id": "a", "node_type": "actor", "features": [[1.0, 2.0], [3.0, 4.0]]},
            {"id": "o", "node_type": "object", "features": [[1.0], [2.0]]}
        ],
        "spatial_edges": [{"t": 0, "a": "a", "b": "o", "weight": -1.0}]
    });
    write(tmp.path(), "table.json", &table);
    let out = stgcn(&["ingest", "--table", "table.json", "--out", "seqs", "--name", "v"], tmp.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn train_writes_checkpoints_and_a_reproducible_curve() {
    let tmp = TempDir::new().unwrap();
    trained(tmp.path(), "single", 3);
    let run = tmp.path().join("run");
    for f in ["epoch001.ckpt.json", "epoch002.ckpt.json", "final.ckpt.json", "curve.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let out = stgcn(
        &[
            "train", "--manifest", "data/manifest.json", "--model-config", "model.json", "--train-config",
            "train.json", "--seed", "1", "--out", "run2",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 0);
    let a = fs::read(run.join("curve.csv")).unwrap();
    let b = fs::read(tmp.path().join("run2/curve.csv")).unwrap();
    assert_eq!(a, b);
    assert!(String::from_utf8(a).unwrap().starts_with("epoch,split,loss,metric\n"));
}

#[test]
fn train_resume_matches_an_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    trained(tmp.path(), "single", 3);
    let mut cfg = train_config("single");
    cfg["epochs"] = json!(1);
    write(tmp.path(), "train1.json", &cfg);
    let base = [
        "train", "--manifest", "data/manifest.json", "--model-config", "model.json", "--seed", "1", "--out", "split",
    ];
    let mut first = base.to_vec();
    first.extend(["--train-config", "train1.json"]);
    assert_eq!(code(&stgcn(&first, tmp.path())), 0);
    let mut second = base.to_vec();
    second.extend(["--train-config", "train.json", "--resume", "split/epoch001.ckpt.json"]);
    assert_eq!(code(&stgcn(&second, tmp.path())), 0);
    let a = fs::read(tmp.path().join("run/final.ckpt.bin")).unwrap();
    let b = fs::read(tmp.path().join("split/final.ckpt.bin")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn preset_with_mismatched_data_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "synth.json", &synth_config("single", 3, 3));
    assert_eq!(code(&stgcn(&["synth", "--config", "synth.json", "--seed", "1", "--out", "data"], tmp.path())), 0);
    let out = stgcn(
        &["train", "--manifest", "data/manifest.json", "--preset", "cad120", "--seed", "0", "--out", "run"],
        tmp.path(),
    );
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_single_mode_reports_macro_f1() {
    let tmp = TempDir::new().unwrap();
    let ck = trained(tmp.path(), "single", 3);
    let out = stgcn(&["eval", "--manifest", "data/manifest.json", "--checkpoint", &ck, "--out", "m.json"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    let f1 = m["macro_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert_eq!(m["per_class"].as_array().unwrap().len(), 3);
    let written: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(written, m);
}

#[test]
fn eval_multi_mode_reports_both_map_variants() {
    let tmp = TempDir::new().unwrap();
    let ck = trained(tmp.path(), "multi", 4);
    let out = stgcn(&["eval", "--manifest", "data/manifest.json", "--checkpoint", &ck], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    for k in ["points", "full"] {
        let v = m[k]["mAP"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k}: {v}");
    }
}

#[test]
fn eval_with_mismatched_classes_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let ck = trained(tmp.path(), "single", 3);
    write(tmp.path(), "synth5.json", &synth_config("single", 4, 5));
    assert_eq!(code(&stgcn(&["synth", "--config", "synth5.json", "--seed", "1", "--out", "five"], tmp.path())), 0);
    let out = stgcn(&["eval", "--manifest", "five/manifest.json", "--checkpoint", &ck], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes"));
}

#[test]
fn infer_writes_one_timeline_per_sequence() {
    let tmp = TempDir::new().unwrap();
    let ck = trained(tmp.path(), "single", 3);
    let out = stgcn(
        &["infer", "--manifest", "data/manifest.json", "--checkpoint", &ck, "--out", "scores", "--split", "all"],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let files: Vec<_> = fs::read_dir(tmp.path().join("scores")).unwrap().collect();
    assert_eq!(files.len(), 10);
    let t: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("scores/seq0000.scores.json")).unwrap()).unwrap();
    for row in t["probs"].as_array().unwrap() {
        let s: f64 = row.as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn gradcheck_ops_pass_on_the_default_suite() {
    let tmp = TempDir::new().unwrap();
    let out = stgcn(&["gradcheck", "--seed", "0", "--ops-only"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["passed"], true);
    assert!(r["checks"].as_array().unwrap().len() > 25);
}

#[test]
fn gradcheck_exit_code_follows_the_report() {
    let tmp = TempDir::new().unwrap();
    let out = stgcn(&["gradcheck", "--seed", "0"], tmp.path());
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let expected = if r["passed"] == true { 0 } else { 3 };
    assert_eq!(code(&out), expected);
}

#[test]
fn gradcheck_samples_coordinates_of_a_user_model() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "model.json", &model_config("single", 3));
    let out = stgcn(&["gradcheck", "--seed", "1", "--model-config", "model.json", "--max-coords", "2"], tmp.path());
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let model = r["checks"].as_array().unwrap().iter().find(|c| c["name"] == "model.scores").cloned().unwrap();
    assert!(model["coords"].as_u64().unwrap() <= 2 * 20);
}
