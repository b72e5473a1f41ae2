//! End-to-end command-line checks: the full generate → train → evaluate →
//! control chain, plus a smoke-scale experiment run.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn phlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phlab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = phlab(dir, args);
    assert!(
        out.status.success(),
        "phlab {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_pipeline_runs() {
    let dir = tempdir().unwrap();
    let d = dir.path();

    ok(d, &["system", "--kind", "tank-leak", "--out", "plant.json"]);
    assert!(d.join("plant.json").exists());

    ok(d, &[
        "gen", "--system", "plant.json", "--samples", "505", "--dt", "0.01", "--length", "1",
        "--noise", "0", "--seed", "3", "--out", "train.ds",
    ]);
    ok(d, &[
        "gen", "--system", "plant.json", "--samples", "202", "--dt", "0.01", "--length", "1",
        "--noise", "0", "--seed", "4", "--out", "test.ds",
    ]);

    ok(d, &[
        "train", "--data", "train.ds", "--model", "phnn", "--integrator", "midpoint",
        "--epochs", "2", "--batch", "256", "--lambda-schedule", "0:0.3,1:0.1",
        "--seed", "5", "--out", "model.ckpt",
    ]);
    assert!(d.join("model.ckpt").exists());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("model.report.json")).unwrap())
            .unwrap();
    assert_eq!(report["epochs"], 2);
    assert_eq!(report["train_loss"].as_array().unwrap().len(), 2);
    let metrics = std::fs::read_to_string(d.join("model.metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "header plus one line per epoch");

    let eval_out = ok(d, &["eval", "--model", "model.ckpt", "--data", "test.ds"]);
    let metrics: serde_json::Value = serde_json::from_str(&eval_out).unwrap();
    assert!(metrics["trajectory_mse"].as_f64().unwrap().is_finite());

    ok(d, &[
        "mpc", "--model", "model.ckpt", "--plant", "plant.json", "--ref", "0.2,0.2,0.2,0.2",
        "--horizon", "5", "--bounds", "-2,2", "--T", "0.1", "--out", "trace.csv",
    ]);
    let trace = std::fs::read_to_string(d.join("trace.csv")).unwrap();
    // 10 control steps: header + 11 states.
    assert_eq!(trace.lines().count(), 12);
    assert!(trace.lines().next().unwrap().starts_with("t,u,stage_cost,x_1"));
}

#[test]
fn train_rejects_unknown_model_kind() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    ok(d, &["system", "--kind", "msd", "--out", "sys.json"]);
    ok(d, &[
        "gen", "--system", "sys.json", "--samples", "30", "--dt", "0.01", "--length", "0.1",
        "--noise", "0", "--seed", "1", "--out", "d.ds",
    ]);
    let out = phlab(d, &[
        "train", "--data", "d.ds", "--model", "phnn-xl", "--epochs", "1", "--out", "m.ckpt",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("phnn-xl"), "stderr names the bad kind: {stderr}");
}

#[test]
fn exp_rejects_unknown_experiment() {
    let dir = tempdir().unwrap();
    let out = phlab(dir.path(), &["exp", "tank-nonsense"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tank-nonsense"));
}

#[test]
fn smoke_experiment_writes_full_artifact_set() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    ok(d, &[
        "exp", "msd-datasize", "--scale", "smoke", "--replicates", "1", "--seed", "9",
        "--out-dir", "run",
    ]);
    let results = std::fs::read_to_string(d.join("run/results.csv")).unwrap();
    let mut lines = results.lines();
    let header = lines.next().unwrap();
    assert_eq!(
        header,
        "experiment,model,dataset_size,replicate,metric,value,config_hash"
    );
    // With one replicate, each (model, size, metric) key appears exactly once.
    let mut keys: Vec<(String, String, String)> = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0], "msd-datasize");
        assert_eq!(fields[6].len(), 64, "config hash is a sha256 hex digest");
        let key = (fields[1].to_string(), fields[2].to_string(), fields[4].to_string());
        assert!(!keys.contains(&key), "duplicate row for {key:?}");
        keys.push(key);
    }
    // All four model kinds trained.
    for kind in ["phnn", "phnn-ft", "baseline1", "baseline2"] {
        assert!(keys.iter().any(|(m, _, _)| m == kind), "missing rows for {kind}");
    }

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["experiment"], "msd-datasize");
    assert_eq!(report["rows"].as_u64().unwrap() as usize, keys.len());
    assert!(report["summaries"].as_array().unwrap().len() > 0);
}

#[test]
fn gen_is_deterministic_per_seed() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    ok(d, &["system", "--kind", "msd", "--out", "sys.json"]);
    for (name, seed) in [("a.ds", "7"), ("b.ds", "7"), ("c.ds", "8")] {
        ok(d, &[
            "gen", "--system", "sys.json", "--samples", "40", "--dt", "0.01", "--length", "0.1",
            "--noise", "0.02", "--seed", seed, "--out", name,
        ]);
    }
    let a = std::fs::read(d.join("a.ds")).unwrap();
    let b = std::fs::read(d.join("b.ds")).unwrap();
    let c = std::fs::read(d.join("c.ds")).unwrap();
    assert_eq!(a, b, "same seed, same bytes");
    assert_ne!(a, c, "different seed, different data");
}
