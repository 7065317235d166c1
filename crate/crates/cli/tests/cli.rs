use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn boxseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boxseg"))
        .current_dir(dir)
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn boxseg")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = boxseg(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Exit status plus the parsed error line.
fn fails(dir: &Path, args: &[&str]) -> (i32, serde_json::Value) {
    let out = boxseg(dir, args);
    let code = out.status.code().expect("exit code");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    let v: serde_json::Value = serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {stderr}"));
    assert_eq!(v["exit_code"], code);
    (code, v)
}

/// Small scenes and a narrow model so a full pipeline runs in seconds.
const SMALL: &str = r#"{
  "scene": {"points_per_instance": [60, 90], "background_points": 80, "instances": [2, 4]},
  "model": {"feature_dim": 16, "ffn_dim": 16, "num_queries": 8, "decoder_layers": 1},
  "train": {"steps": 4}
}"#;

fn small_corpus(dir: &Path) {
    fs::write(dir.join("small.json"), SMALL).unwrap();
    ok(dir, &["gen-scenes", "--n", "2", "--seed", "3", "--out", "corpus", "--config", "small.json"]);
}

#[test]
fn gen_scenes_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["gen-scenes", "--n", "3", "--seed", "11", "--out", "a"]);
    ok(d.path(), &["gen-scenes", "--n", "3", "--seed", "11", "--out", "b"]);
    for seed in 11..14 {
        let name = format!("scene_{seed}.json");
        let a = fs::read(d.path().join("a").join(&name)).unwrap();
        let b = fs::read(d.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    assert!(d.path().join("a/config_resolved.json").exists());
}

#[test]
fn pipeline_and_replay() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    small_corpus(p);
    ok(p, &["train", "--corpus", "corpus", "--out", "run", "--config", "small.json", "--precision", "f64"]);
    let metrics = fs::read_to_string(p.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    assert!(metrics.starts_with("step,bce,dice,cls,q,f,total,lr\n"));

    ok(p, &["train", "--config", "run/config_resolved.json", "--out", "replay"]);
    assert_eq!(metrics, fs::read_to_string(p.join("replay/metrics.csv")).unwrap());

    ok(p, &["eval", "--corpus", "corpus", "--checkpoint", "run/checkpoint_final.json", "--out", "ev/metrics.json"]);
    let ev: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("ev/metrics.json")).unwrap()).unwrap();
    for k in ["ap", "ap50", "ap25"] {
        let v = ev[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k}={v}");
    }

    ok(p, &["pseudo-label", "--corpus", "corpus", "--checkpoint", "run/checkpoint_final.json", "--out", "pl"]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("pl/pseudo_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["scenes"], 2);
    assert!(p.join("pl/pseudo_3.json").exists());

    ok(p, &["report", "--metrics", "ev/metrics.json", "--out", "ev.csv"]);
    assert!(fs::read_to_string(p.join("ev.csv")).unwrap().starts_with("scope,metric,value\n"));
    ok(p, &["report", "--metrics", "run/metrics.csv", "--out", "train.csv"]);
    assert_eq!(fs::read_to_string(p.join("train.csv")).unwrap().lines().count(), 5);
}

#[test]
fn loss_switches_zero_their_columns() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    small_corpus(p);
    ok(p, &["train", "--config", "small.json", "--corpus", "corpus", "--out", "run", "--no-loss-q", "--no-loss-f", "--steps", "2"]);
    let metrics = fs::read_to_string(p.join("run/metrics.csv")).unwrap();
    for row in metrics.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!((cols[4], cols[5]), ("0", "0"), "{row}");
    }
}

#[test]
fn mismatched_checkpoint_exits_6() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    small_corpus(p);
    ok(p, &["train", "--config", "small.json", "--corpus", "corpus", "--out", "run", "--steps", "1"]);
    fs::write(p.join("wide.json"), r#"{"model": {"feature_dim": 24, "ffn_dim": 16, "num_queries": 8}}"#).unwrap();
    let (code, v) = fails(p, &["eval", "--corpus", "corpus", "--checkpoint", "run/checkpoint_final.json", "--out", "m.json", "--config", "wide.json"]);
    assert_eq!(code, 6);
    assert_eq!(v["error"], "checkpoint");
    assert!(!p.join("m.json").exists());
}

#[test]
fn bad_config_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(p.join("typo.json"), r#"{"train": {"stpes": 3}}"#).unwrap();
    assert_eq!(fails(p, &["gen-scenes", "--n", "1", "--out", "c", "--config", "typo.json"]).0, 3);
    fs::write(p.join("lr.json"), r#"{"train": {"lr": -1.0}}"#).unwrap();
    assert_eq!(fails(p, &["train", "--corpus", "c", "--out", "o", "--config", "lr.json"]).0, 3);
    // no corpus anywhere
    assert_eq!(fails(p, &["train", "--out", "o"]).0, 3);
}

#[test]
fn missing_paths_exit_4() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(fails(p, &["train", "--corpus", "absent", "--out", "o"]).0, 4);
    assert_eq!(fails(p, &["gen-scenes", "--n", "1", "--out", "c", "--config", "absent.json"]).0, 4);
    assert_eq!(fails(p, &["report", "--metrics", "absent.csv", "--out", "r.csv"]).0, 4);
}

#[test]
fn inputs_are_not_modified() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    small_corpus(p);
    let before = fs::read(p.join("corpus/scene_3.json")).unwrap();
    ok(p, &["train", "--config", "small.json", "--corpus", "corpus", "--out", "run", "--steps", "1"]);
    let ck = fs::read(p.join("run/checkpoint_final.json")).unwrap();
    ok(p, &["eval", "--corpus", "corpus", "--checkpoint", "run/checkpoint_final.json", "--out", "m.json"]);
    assert_eq!(before, fs::read(p.join("corpus/scene_3.json")).unwrap());
    assert_eq!(ck, fs::read(p.join("run/checkpoint_final.json")).unwrap());
}
