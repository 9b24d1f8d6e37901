use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn atp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atp"))
        .args(args)
        .env("ATP_LOG", "error")
        .output()
        .expect("run atp")
}

fn ok(args: &[&str]) -> Output {
    let out = atp(args);
    assert!(
        out.status.success(),
        "atp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// gen-demos → augment → train on a tiny configuration; returns (demos dir, data, model).
fn pipeline(dir: &Path, seed: &str) -> (String, String, String) {
    let demos = dir.join("demos");
    let data = dir.join("data.jsonl");
    let model = dir.join("model.json");
    ok(&["gen-demos", "--out", p(&demos), "--steps", "12", "--seed", seed]);
    ok(&["augment", "--demos", p(&demos), "--n", "60", "--seed", seed, "--out", p(&data)]);
    ok(&[
        "train", "--data", p(&data), "--epochs", "3", "--batch", "20", "--seed", seed, "--out", p(&model),
    ]);
    (p(&demos).into(), p(&data).into(), p(&model).into())
}

#[test]
fn pipeline_outputs_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (demos_a, data_a, model_a) = pipeline(a.path(), "5");
    let (_, data_b, model_b) = pipeline(b.path(), "5");

    assert_eq!(fs::read_dir(&demos_a).unwrap().count(), 4);
    let data = fs::read_to_string(&data_a).unwrap();
    assert_eq!(data.lines().count(), 60);
    assert_eq!(data, fs::read_to_string(&data_b).unwrap());
    assert_eq!(fs::read(&model_a).unwrap(), fs::read(&model_b).unwrap());

    let metrics = fs::read_to_string(a.path().join("model.metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert!(lines.next().unwrap().starts_with("epoch,loss,recon_mse"));
    assert_eq!(lines.count(), 3);
    assert_eq!(metrics, fs::read_to_string(b.path().join("model.metrics.csv")).unwrap());

    // a different seed changes the dataset
    let c = tempfile::tempdir().unwrap();
    let (_, data_c, _) = pipeline(c.path(), "6");
    assert_ne!(data, fs::read_to_string(&data_c).unwrap());
}

#[test]
fn plan_traverse_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (demos, data, model) = pipeline(dir.path(), "1");
    let snapshot = || {
        let demo = fs::read(Path::new(&demos).join("demo_00.json")).unwrap();
        (demo, fs::read(&data).unwrap(), fs::read(&model).unwrap())
    };
    let before = snapshot();

    let plan_path = dir.path().join("plan.json");
    ok(&[
        "plan", "--model", &model, "--c", "1", "--z", "0,1.28,0,0,0", "--goal", "-0.5,0.4", "--project", "--out",
        p(&plan_path),
    ]);
    let plan: Value = serde_json::from_str(&fs::read_to_string(&plan_path).unwrap()).unwrap();
    assert!(plan["err_after_m"].as_f64().unwrap() < 1e-3);
    assert_eq!(plan["ee_path"].as_array().unwrap().len(), 12);

    let stdout = ok(&["plan", "--model", &model, "--goal", "0.6,0.4"]).stdout;
    let raw: Value = serde_json::from_slice(&stdout).unwrap();
    assert_eq!(raw["err_after_m"], raw["err_before_m"]);

    let bundle = dir.path().join("traverse.json");
    ok(&["traverse", "--model", &model, "--axis", "z2", "--goal", "0.6,0.4", "--out", p(&bundle)]);
    let bundle: Value = serde_json::from_str(&fs::read_to_string(&bundle).unwrap()).unwrap();
    assert_eq!(bundle["results"].as_array().unwrap().len(), 7);
    let out = ok(&["traverse", "--model", &model, "--axis", "c", "--goal", "0.6,0.4"]).stdout;
    let bundle: Value = serde_json::from_slice(&out).unwrap();
    assert_eq!(bundle["results"].as_array().unwrap().len(), 4);

    let csv = dir.path().join("eval.csv");
    let out = ok(&["eval", "--model", &model, "--demos", &demos, "--n", "5", "--out", p(&csv)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("median_before_m"));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("goal_x,goal_y,err_before_m,err_after_m,iters,converged\n"));
    assert_eq!(text.lines().count(), 6);
    let again = dir.path().join("eval2.csv");
    ok(&["eval", "--model", &model, "--demos", &demos, "--n", "5", "--out", p(&again)]);
    assert_eq!(text, fs::read_to_string(&again).unwrap());

    assert!(before == snapshot(), "inputs were modified");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, model) = pipeline(dir.path(), "2");

    // usage errors
    assert_eq!(atp(&[]).status.code(), Some(2));
    assert_eq!(atp(&["plan", "--model", &model]).status.code(), Some(2));
    assert_eq!(atp(&["train", "--epochs", "x"]).status.code(), Some(2));
    assert_eq!(atp(&["frobnicate"]).status.code(), Some(2));

    // domain errors
    let unreachable = atp(&["plan", "--model", &model, "--goal", "9,9", "--project"]);
    assert_eq!(unreachable.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&unreachable.stderr).unwrap();
    assert_eq!(err["error"], "unreachable");
    let missing = atp(&["plan", "--model", p(&dir.path().join("nope.json")), "--goal", "0.5,0.5"]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(atp(&["plan", "--model", &model, "--goal", "0.5,0.5,0.1"]).status.code(), Some(1));
    assert_eq!(atp(&["traverse", "--model", &model, "--goal", "0.5,0.5", "--axis", "q"]).status.code(), Some(1));

    // non-convergence still writes the best result
    let best = dir.path().join("best.json");
    let out = atp(&[
        "plan", "--model", &model, "--goal", "0.2,0.7", "--project", "--max-iters", "1", "--tol", "1e-12", "--out",
        p(&best),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let best: Value = serde_json::from_str(&fs::read_to_string(&best).unwrap()).unwrap();
    assert_eq!(best["report"]["converged"], false);
}

#[test]
fn spatial_chain_goal() {
    let dir = tempfile::tempdir().unwrap();
    let demos = dir.path().join("demos");
    let data = dir.path().join("data.jsonl");
    let model = dir.path().join("model.json");
    ok(&["gen-demos", "--chain", "spatial", "--steps", "10", "--out", p(&demos)]);
    ok(&["augment", "--demos", p(&demos), "--n", "20", "--out", p(&data)]);
    ok(&["train", "--data", p(&data), "--epochs", "1", "--batch", "10", "--out", p(&model)]);
    let out = ok(&["plan", "--model", p(&model), "--c", "0", "--z", "0,1.28,0,0,0", "--goal", "0,-0.7,0.2", "--project"]);
    let plan: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(plan["ee_path"][0].as_array().unwrap().len(), 3);
    assert!(plan["err_after_m"].as_f64().unwrap() < 1e-3);
    // planar chain forced onto spatial data
    let bad = atp(&["train", "--data", p(&data), "--chain", "planar", "--epochs", "1", "--out", p(&model)]);
    assert_eq!(bad.status.code(), Some(1));
}
