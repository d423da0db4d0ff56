use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "episodes": 20,
  "episode_len": 14,
  "object_count_range": [5, 6],
  "extrapolation_range": [7, 8],
  "eval": {"sim_horizon": 12, "control_horizon": 8, "mpc_period": 4, "trials": 2,
           "sweep_sysid_samples": [26, 52], "sweep_seeds": 2, "sweep_m": [2, 3]},
  "model": {"m": 3, "sysid_episodes": 2},
  "train": {"iterations": 4, "batch_size": 2, "subseq_len": 6, "hidden": 8,
            "metric_pair_count": 4, "learning_rate": 0.001}
}"#;

fn ckpm(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("config.json");
    if !config.exists() {
        fs::write(&config, CONFIG).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_ckpm"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = ckpm(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join("out").join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn lines(dir: &Path, name: &str) -> usize {
    String::from_utf8(read(dir, name)).unwrap().lines().count()
}

#[test]
fn datagen_is_deterministic_and_splits_nine_to_one() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        ok(d.path(), &["datagen", "--seed", "4"]);
    }
    for f in ["data/train.jsonl", "data/test.jsonl", "data/extrapolate.jsonl", "data/manifest.json"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    assert_eq!(lines(a.path(), "data/train.jsonl"), 18);
    assert_eq!(lines(a.path(), "data/test.jsonl"), 2);

    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &["datagen", "--seed", "5"]);
    assert_ne!(read(a.path(), "data/train.jsonl"), read(c.path(), "data/train.jsonl"));
}

#[test]
fn every_report_repeats_byte_for_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let steps: [&[&str]; 7] = [
        &["datagen"],
        &["train"],
        &["eval-sim"],
        &["eval-sim", "--extrapolate"],
        &["eval-control"],
        &["eval-sim", "--mode", "KPM"],
        &["sweep", "--axis", "sysid_data"],
    ];
    for d in [&a, &b] {
        for args in steps {
            ok(d.path(), args);
        }
        ok(d.path(), &["report"]);
    }
    let names = [
        "model_block.json",
        "loss_block.csv",
        "train_block.json",
        "eval_sim_block.json",
        "eval_sim_block.csv",
        "eval_sim_block_extrap.json",
        "eval_control_block.json",
        "eval_sim_kpm.json",
        "sweep_sysid_data_block.json",
        "summary.csv",
    ];
    for name in names {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
    let report: serde_json::Value = serde_json::from_slice(&read(a.path(), "eval_sim_block.json")).unwrap();
    assert_eq!(report["input_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(report["config"]["model"]["m"], 3);
    assert!(report["config"].get("output_dir").is_none());
    assert_eq!(lines(a.path(), "summary.csv"), 1 + 6);
}

#[test]
fn config_problems_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    // no data yet
    assert_eq!(ckpm(d.path(), &["eval-sim"]).status.code(), Some(2));
    assert_eq!(ckpm(d.path(), &["datagen", "--mode", "Sparse"]).status.code(), Some(2));
    assert_eq!(ckpm(d.path(), &["datagen", "--lambda", "-1"]).status.code(), Some(2));
    fs::write(d.path().join("config.json"), r#"{"episodes": 0}"#).unwrap();
    assert_eq!(ckpm(d.path(), &["datagen"]).status.code(), Some(2));
    fs::write(d.path().join("config.json"), r#"{"epsiodes": 10}"#).unwrap();
    let out = ckpm(d.path(), &["datagen"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsiodes"));
}

#[test]
fn numerical_failure_exits_with_three() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["datagen"]);
    let mut cfg: serde_json::Value = serde_json::from_str(CONFIG).unwrap();
    cfg["train"]["learning_rate"] = serde_json::json!(1e4);
    cfg["train"]["iterations"] = serde_json::json!(60);
    cfg["train"]["grad_clip"] = serde_json::json!(0.0);
    cfg["train"]["divergence_factor"] = serde_json::json!(1.5);
    fs::write(d.path().join("config.json"), cfg.to_string()).unwrap();
    let out = ckpm(d.path(), &["train"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
