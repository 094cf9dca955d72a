use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn shiftguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftguard"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = shiftguard(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

const SMALL_SPEC: &str = r#"{
  "name": "small",
  "pipeline": "prob_threshold",
  "calibrated": true,
  "base_models": ["stumps", "mlp"],
  "seed": 3,
  "dataset": { "n": 400, "d": 4, "class_sep": 2.0 },
  "mlp": { "layer_sizes": [8], "epochs": 5, "batch_size": 64 },
  "stumps": { "rounds": 10 }
}"#;

#[test]
fn gen_train_calibrate_stumps() {
    let dir = TempDir::new().unwrap();
    let data = p(dir.path(), "data.csv");
    ok(&[
        "gen", "--n", "300", "--d", "3", "--sep", "3", "--seed", "1", "--out", &data,
    ]);
    let text = fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 301);
    assert!(text.lines().next().unwrap().ends_with("label"));

    let model = p(dir.path(), "stumps.json");
    ok(&["train", "--model", "stumps", "--data", &data, "--out", &model]);
    let calib = p(dir.path(), "calib.json");
    ok(&[
        "calibrate",
        "--model",
        &model,
        "--method",
        "isotonic",
        "--data",
        &data,
        "--out",
        &calib,
    ]);
    let artifact: serde_json::Value = serde_json::from_str(&fs::read_to_string(&calib).unwrap()).unwrap();
    assert_eq!(artifact["method"], "isotonic");
}

#[test]
fn train_mlp_with_config_then_temperature() {
    let dir = TempDir::new().unwrap();
    let data = p(dir.path(), "data.csv");
    ok(&[
        "gen", "--n", "200", "--d", "3", "--sep", "3", "--seed", "2", "--out", &data,
    ]);
    let cfg = p(dir.path(), "cfg.json");
    fs::write(&cfg, r#"{ "seed": 5, "mlp": { "layer_sizes": [8], "epochs": 3 } }"#).unwrap();
    let model = p(dir.path(), "mlp.json");
    ok(&[
        "train", "--model", "mlp", "--data", &data, "--config", &cfg, "--out", &model,
    ]);
    let calib = p(dir.path(), "calib.json");
    ok(&[
        "calibrate",
        "--model",
        &model,
        "--method",
        "temperature",
        "--data",
        &data,
        "--out",
        &calib,
    ]);
    let artifact: serde_json::Value = serde_json::from_str(&fs::read_to_string(&calib).unwrap()).unwrap();
    assert_eq!(artifact["method"], "temperature");

    let out = shiftguard(&[
        "calibrate",
        "--model",
        &model,
        "--method",
        "isotonic",
        "--data",
        &data,
        "--out",
        &calib,
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("[calibrate]"), "{}", stderr(&out));
}

#[test]
fn run_is_byte_identical_and_sweep_exports() {
    let dir = TempDir::new().unwrap();
    let spec = p(dir.path(), "spec.json");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let a = p(dir.path(), "a.json");
    let b = p(dir.path(), "b.json");
    ok(&["run", "--spec", &spec, "--out", &a]);
    ok(&["run", "--spec", &spec, "--out", &b]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let csv = p(dir.path(), "curve.csv");
    ok(&["sweep", "--report", &a, "--csv", &csv]);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("theta,ca_pct,cr_pct,h"));
    assert!(text.lines().count() > 2);
}

#[test]
fn matrix_isolates_failures() {
    let dir = TempDir::new().unwrap();
    let specs = dir.path().join("specs");
    fs::create_dir(&specs).unwrap();
    fs::write(specs.join("a.json"), SMALL_SPEC).unwrap();
    fs::write(
        specs.join("b.json"),
        SMALL_SPEC.replace("\"calibrated\": true", "\"calibrated\": false"),
    )
    .unwrap();
    let results = p(dir.path(), "results");
    ok(&["matrix", "--specs", specs.to_str().unwrap(), "--out", &results]);
    let table = fs::read_to_string(dir.path().join("results/comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(dir.path().join("results/a.json").exists());
    assert!(dir.path().join("results/b.json").exists());
}

#[test]
fn failures_exit_nonzero_with_stage() {
    let dir = TempDir::new().unwrap();
    let missing = p(dir.path(), "missing.csv");
    let out = shiftguard(&[
        "train",
        "--model",
        "mlp",
        "--data",
        &missing,
        "--out",
        &p(dir.path(), "m.json"),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error [load]"), "{}", stderr(&out));

    let spec = p(dir.path(), "bad.json");
    fs::write(
        &spec,
        r#"{ "pipeline": "ice_uncertainty_ncm", "base_models": ["stumps"] }"#,
    )
    .unwrap();
    let out = shiftguard(&["run", "--spec", &spec, "--out", &p(dir.path(), "r.json")]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error [spec]"), "{}", stderr(&out));

    let out = shiftguard(&[
        "gen", "--n", "3", "--d", "2", "--sep", "1", "--seed", "0", "--out", &missing,
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error [gen]"), "{}", stderr(&out));

    let out = shiftguard(&["train", "--model", "forest", "--data", &missing, "--out", &missing]);
    assert!(!out.status.success());
}
