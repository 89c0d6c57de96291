use std::fs;
use std::path::Path;
use std::process::Command;

use demo_cli::*;
use demo_core::data::{Config, ScenarioKind};
use demo_core::dynamics::{inverse_controls, InverseOptions, StepSpec};
use demo_core::verify::SuiteOptions;

fn small(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("small.cfg");
    fs::write(&p, "model.d_model = 8\nmodel.z_dim = 2\nmodel.scan_state = 2\n").unwrap();
    p
}

fn cfg(dir: &Path) -> Config {
    resolve_config(Some(&small(dir)), &Overrides::default()).unwrap()
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_demo"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn train_one_epoch_on_ten_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(dir.path());
    c.train.epochs = 1;
    c.synth.count = 10;
    let m = cmd_train(&c, None, &dir.path().join("run")).unwrap();
    assert_eq!(m.epochs_completed, 1);
    assert!(m.checkpoint.exists());
    let csv = fs::read_to_string(&m.loss_csv).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(m.input_hash.len(), 64);
    let runs: Vec<_> = fs::read_dir(dir.path().join("run"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name() == MANIFEST_FILE)
        .collect();
    assert_eq!(runs.len(), 1);
}

#[test]
fn loss_csv_has_a_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(dir.path());
    c.train.epochs = 3;
    c.synth.count = 10;
    let m = cmd_train(&c, None, &dir.path().join("run")).unwrap();
    let csv = fs::read_to_string(&m.loss_csv).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        assert!(r.starts_with(&format!("{},", i + 1)));
    }
}

#[test]
fn simulate_writes_nothing_for_zero_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(dir.path());
    assert!(cmd_simulate(&c, None, 0, 1, &dir.path().join("none")).unwrap().is_empty());
    assert!(!dir.path().join("none").exists());
    let a = cmd_simulate(&c, None, 6, 5, &dir.path().join("a")).unwrap();
    let b = cmd_simulate(&c, None, 6, 5, &dir.path().join("b")).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
}

#[test]
fn simulated_straight_scenes_invert_exactly_without_noise() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(dir.path());
    c.synth.noise_std = 0.0;
    let out = dir.path().join("sim");
    cmd_simulate(&c, Some(ScenarioKind::Straight), 4, 2, &out).unwrap();
    let (scenes, _) = load_scenes(&out.join("scenes.csv"), &c).unwrap();
    assert_eq!(scenes.len(), 4);
    let spec = StepSpec::new(c.horizon.dt_s).unwrap();
    for s in &scenes {
        let states: Vec<_> = s.target.history.iter().chain(&s.target.future).copied().collect();
        for w in states.windows(2) {
            let u = inverse_controls(&w[0], &w[1], &c.attrs, spec, InverseOptions::default()).unwrap();
            let next = demo_core::dynamics::discrete_step(&w[0], &u, &c.attrs, spec).unwrap();
            let r = [next.x_m - w[1].x_m, next.y_m - w[1].y_m, next.vx_mps - w[1].vx_mps, next.vy_mps - w[1].vy_mps];
            assert!(r.iter().all(|v| v.abs() < 1e-9), "{r:?}");
        }
    }
}

#[test]
fn predict_is_repeatable_and_evaluate_checks_ids() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(dir.path());
    c.train.epochs = 1;
    c.synth.count = 10;
    let run = dir.path().join("run");
    let m = cmd_train(&c, None, &run).unwrap();
    let sim = dir.path().join("sim");
    cmd_simulate(&c, None, 5, 9, &sim).unwrap();
    let (p1, p2) = (dir.path().join("p1.json"), dir.path().join("p2.json"));
    let preds = cmd_predict(&c, &m.checkpoint, &sim, &p1).unwrap();
    cmd_predict(&c, &m.checkpoint, &sim, &p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    assert!(preds.iter().all(|p| p.prediction.trajectories.len() == 6));

    let svg = dir.path().join("svg");
    let (report, table) = cmd_evaluate(&c, &p1, &sim, None, Some(&svg)).unwrap();
    assert_eq!(report.count, 5);
    assert!(table.contains("RMSE"));
    assert_eq!(fs::read_dir(&svg).unwrap().count(), 5);

    // a prediction for a scene that is not in the ground truth
    let mut odd = read_predictions(&p1).unwrap();
    odd[0].scene_id = "nowhere".into();
    fs::write(&p2, serde_json::to_string(&odd).unwrap()).unwrap();
    let err = cmd_evaluate(&c, &p2, &sim, None, None).unwrap_err();
    assert!(matches!(err, CliError::Metrics(demo_core::metrics::MetricsError::IdMismatch(_))));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn perfect_predictions_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(dir.path());
    let sim = dir.path().join("sim");
    cmd_simulate(&c, None, 3, 1, &sim).unwrap();
    let (scenes, _) = load_scenes(&sim, &c).unwrap();
    let preds: Vec<_> = scenes
        .iter()
        .map(|s| demo_core::model::ScenePrediction {
            scene_id: s.scene_id.clone(),
            prediction: demo_core::decoder::PredictionSet {
                trajectories: vec![s.target.future.iter().map(|p| p.position()).collect(); 6],
                maneuver_probs: vec![1.0 / 6.0; 6],
            },
            short_term: Vec::new(),
        })
        .collect();
    let p = dir.path().join("p.json");
    fs::write(&p, serde_json::to_string(&preds).unwrap()).unwrap();
    let (r, _) = cmd_evaluate(&c, &p, &sim, None, None).unwrap();
    assert!(r.rmse_per_second.values().chain(r.min_ade_k.values()).all(|&v| v == 0.0));
}

#[test]
fn checkpoint_for_other_dims_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(dir.path());
    c.train.epochs = 1;
    c.synth.count = 10;
    let m = cmd_train(&c, None, &dir.path().join("run")).unwrap();
    let mut other = c.clone();
    other.model.d_model = 12;
    let err = load_model(&other, &m.checkpoint).unwrap_err();
    assert!(matches!(err, CliError::Checkpoint(demo_core::numkernel::KernelError::CheckpointMismatch(_))));
}

#[test]
fn injected_gradient_fault_fails_verify() {
    let (outcomes, matrix, status) = cmd_verify(SuiteOptions {
        inject_gradient_fault: true,
    });
    let grad = outcomes.iter().find(|o| o.name == "layer gradients").unwrap();
    assert!(!grad.passed);
    assert!(matrix.contains("FAIL  layer gradients"));
    assert_eq!(status.unwrap_err().exit_code(), 3);
}

#[test]
fn threads_env_parsing() {
    assert_eq!(threads_from_env(None).unwrap(), None);
    assert_eq!(threads_from_env(Some("2")).unwrap(), Some(2));
    assert_eq!(threads_from_env(Some("0")).unwrap_err().exit_code(), 1);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfgp = small(dir.path());
    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code().unwrap();

    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["train", "--mode", "bogus", "--out", "x"]), 1);
    assert_eq!(code(&["train"]), 1);
    assert_eq!(code(&["evaluate", "--predictions", "none.json", "--data", "none"]), 2);
    let bad = bin().args(["verify"]).env("DEMO_THREADS", "zero").output().unwrap();
    assert_eq!(bad.status.code(), Some(1));

    let sim = dir.path().join("sim");
    let cfgs = cfgp.to_str().unwrap();
    assert_eq!(code(&["simulate", "--config", cfgs, "--count", "10", "--out", sim.to_str().unwrap()]), 0);
    let run = dir.path().join("run");
    let out = bin()
        .args(["train", "--config", cfgs, "--epochs", "1", "--data", sim.to_str().unwrap()])
        .args(["--out", run.to_str().unwrap()])
        .env("DEMO_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    // scenes with a broken history are data errors
    let csv = fs::read_to_string(sim.join("scenes.csv")).unwrap();
    let broken = dir.path().join("broken.csv");
    fs::write(&broken, csv.replacen(",target,", ",target,x", 1) + "garbage\n").unwrap();
    assert_eq!(
        code(&[
            "predict",
            "--config",
            cfgs,
            "--checkpoint",
            run.join(CHECKPOINT_FILE).to_str().unwrap(),
            "--data",
            broken.to_str().unwrap(),
            "--out",
            dir.path().join("p.json").to_str().unwrap()
        ]),
        2
    );
}
