//! Subcommands of the `demo` binary as plain functions.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use demo_core::data::{
    load_scenes_json, load_trajectory_csv, split, synth_mixed, synth_scenario, write_trajectory_csv, Config,
    ConfigError, DataError, IngestOptions, Mode, ScenarioKind, Scene,
};
use demo_core::metrics::{evaluate_by_id, MetricReport, MetricsError};
use demo_core::model::{DemoModel, ScenePrediction};
use demo_core::numkernel::checkpoint::{read_checkpoint, write_checkpoint};
use demo_core::numkernel::KernelError;
use demo_core::train::{baseline_report, evaluate_model, train, EpochLog, TrainError};
use demo_core::verify::{format_matrix, run_suite, CheckOutcome, SuiteOptions};
use demo_core::ModelError;

pub mod svg;

pub use demo_core;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("checkpoint: {0}")]
    Checkpoint(KernelError),
    #[error("io: {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("verification failed: {0}")]
    VerifyFailed(String),
}

impl CliError {
    /// 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Model(e) if e.is_numeric() => 3,
            CliError::VerifyFailed(_) => 3,
            _ => 2,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => CliError::Model(m),
            TrainError::Data(d) => CliError::Data(d),
            TrainError::Metrics(m) => CliError::Metrics(m),
            TrainError::NoScenes => CliError::Data(DataError::InvalidScene {
                scene: "-".into(),
                msg: "no training scenes".into(),
            }),
            TrainError::Callback(msg) => CliError::Io {
                path: PathBuf::from("-"),
                source: std::io::Error::other(msg),
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

/// Flag values that override the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub k: Option<usize>,
}

/// Loads `path` (or the mode defaults) and applies the flag overrides.
pub fn resolve_config(path: Option<&Path>, ov: &Overrides) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p, ov.mode)?,
        None => Config::for_mode(ov.mode.unwrap_or_default()),
    };
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(e) = ov.epochs {
        cfg.train.epochs = e;
    }
    if let Some(k) = ov.k {
        if !(1..=demo_core::decoder::NUM_MANEUVERS).contains(&k) {
            return Err(CliError::Usage(format!(
                "--k must be between 1 and {}",
                demo_core::decoder::NUM_MANEUVERS
            )));
        }
        cfg.eval_k = if k == 1 { vec![1] } else { vec![1, k] };
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn ingest_options(cfg: &Config) -> IngestOptions {
    IngestOptions {
        horizon: cfg.horizon,
        n_max: cfg.model.n_max,
        stride_frames: cfg.stride_frames,
        attrs: cfg.attrs,
    }
}

fn data_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json")))
            .filter(|p| p.file_name().and_then(|n| n.to_str()) != Some("controls.json"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CliError::Data(DataError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no .csv or .json scene files in {}", path.display()),
            ))));
        }
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

/// Scenes from a trajectory CSV, a scene JSON array, or a directory of them
/// (files in name order). Returns the scenes and the files read.
pub fn load_scenes(path: &Path, cfg: &Config) -> Result<(Vec<Scene>, Vec<PathBuf>)> {
    let files = data_files(path)?;
    let opts = ingest_options(cfg);
    let mut scenes = Vec::new();
    for f in &files {
        let mut part = match f.extension().and_then(|e| e.to_str()) {
            Some("json") => load_scenes_json(f)?,
            _ => load_trajectory_csv(f, &opts)?,
        };
        scenes.append(&mut part);
    }
    for s in &scenes {
        s.validate(&cfg.horizon, false)?;
    }
    Ok((scenes, files))
}

/// Wall-clock seconds per phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub load_s: f64,
    pub train_s: f64,
    pub eval_s: f64,
    pub total_s: f64,
}

/// Record of one training run, written as `manifest.json` in the run
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: String,
    pub seed: u64,
    pub mode: Mode,
    /// SHA-256 over the config snapshot and every input byte.
    pub input_hash: String,
    pub data_source: String,
    pub scenes: [usize; 3],
    pub epochs_completed: usize,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub metrics: PathBuf,
    pub timings: Timings,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.json";

fn save_checkpoint(model: &DemoModel, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    write_checkpoint(&model.store, &mut f).map_err(CliError::Checkpoint)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Model and constant-velocity reports on the held-out scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub model: MetricReport,
    pub const_velocity: MetricReport,
}

/// Trains on `data` (or on `config.synth.count` generated scenes when no
/// data is given), overwriting the checkpoint after every epoch, and scores
/// the test split.
pub fn cmd_train(config: &Config, data: Option<&Path>, out_dir: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut hasher = Sha256::new();
    let config_text = config.to_text();
    hasher.update(config_text.as_bytes());

    let (scenes, source) = match data {
        Some(p) => {
            let (scenes, files) = load_scenes(p, config)?;
            for f in &files {
                hasher.update(f.file_name().map(|n| n.as_encoded_bytes()).unwrap_or_default());
                hasher.update(read_file(f)?);
            }
            (scenes, p.display().to_string())
        }
        None => {
            let s: Vec<Scene> = synth_mixed(
                config.synth.count,
                config.synth.noise_std,
                config.seed,
                &config.attrs,
                &config.horizon,
            )
            .into_iter()
            .map(|s| s.scene)
            .collect();
            hasher.update(b"synthetic");
            (s, format!("synthetic:{}", config.synth.count))
        }
    };
    if let Some(s) = scenes.iter().find(|s| !s.has_future()) {
        return Err(ModelError::MissingFuture(s.scene_id.clone()).into());
    }
    let (tr, va, te) = split(&scenes, config.train.split, config.seed)?;
    let test = if te.is_empty() {
        log::warn!("empty test split, scoring on all {} scenes", scenes.len());
        scenes.clone()
    } else {
        te.clone()
    };
    let load_s = start.elapsed().as_secs_f64();

    let t_train = Instant::now();
    let mut model = DemoModel::new(config)?;
    let tr_p: Vec<_> = tr.iter().map(|s| model.prepare(s)).collect();
    let va_p: Vec<_> = va.iter().map(|s| model.prepare(s)).collect();
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let loss_path = out_dir.join(LOSS_FILE);
    let mut loss_csv = format!("{}\n", EpochLog::CSV_HEADER);
    write_file(&loss_path, &loss_csv)?;
    let logs = train(&mut model, &tr_p, &va_p, config.train.epochs, |log, m| {
        loss_csv.push_str(&log.csv_row());
        loss_csv.push('\n');
        fs::write(&loss_path, &loss_csv).map_err(|e| e.to_string())?;
        save_checkpoint(m, &ckpt).map_err(|e| e.to_string())
    })?;
    if logs.is_empty() {
        save_checkpoint(&model, &ckpt)?;
    }
    let train_s = t_train.elapsed().as_secs_f64();

    let t_eval = Instant::now();
    let (report, _) = evaluate_model(&model, &test)?;
    let metrics = RunMetrics {
        model: report,
        const_velocity: baseline_report(config, &test, 1)?,
    };
    let metrics_path = out_dir.join(METRICS_FILE);
    write_file(&metrics_path, serde_json::to_string_pretty(&metrics)?)?;
    write_file(
        &out_dir.join("metrics.txt"),
        format!(
            "{}\n{}",
            metrics.model.to_table("model"),
            metrics.const_velocity.to_table("constant velocity")
        ),
    )?;
    let eval_s = t_eval.elapsed().as_secs_f64();

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config_text,
        seed: config.seed,
        mode: config.mode,
        input_hash: hex::encode(hasher.finalize()),
        data_source: source,
        scenes: [tr.len(), va.len(), test.len()],
        epochs_completed: logs.len(),
        checkpoint: ckpt,
        loss_csv: loss_path,
        metrics: metrics_path,
        timings: Timings {
            load_s,
            train_s,
            eval_s,
            total_s: start.elapsed().as_secs_f64(),
        },
    };
    write_file(&out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Builds the model for `config` and loads `checkpoint` into it.
pub fn load_model(config: &Config, checkpoint: &Path) -> Result<DemoModel> {
    let mut model = DemoModel::new(config)?;
    let mut f = fs::File::open(checkpoint).map_err(io_err(checkpoint))?;
    let store = read_checkpoint(&mut f).map_err(CliError::Checkpoint)?;
    model.store.load_values(&store).map_err(CliError::Checkpoint)?;
    Ok(model)
}

/// Deterministic predictions (prior-mean latents) for every scene in
/// `scene_file`, written as a JSON array to `out`.
pub fn cmd_predict(config: &Config, checkpoint: &Path, scene_file: &Path, out: &Path) -> Result<Vec<ScenePrediction>> {
    let model = load_model(config, checkpoint)?;
    let (scenes, _) = load_scenes(scene_file, config)?;
    let preds = demo_core::train::predict_all(&model, &scenes)?;
    write_file(out, serde_json::to_string_pretty(&preds)?)?;
    Ok(preds)
}

pub fn read_predictions(path: &Path) -> Result<Vec<ScenePrediction>> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

/// Scores `predictions` against the futures in `gt`, matched by scene id.
/// Writes the report JSON to `out` and, with `svg_dir`, one overlay per
/// scene. Returns the report and its text table.
pub fn cmd_evaluate(
    config: &Config,
    predictions: &Path,
    gt: &Path,
    out: Option<&Path>,
    svg_dir: Option<&Path>,
) -> Result<(MetricReport, String)> {
    let preds = read_predictions(predictions)?;
    let (scenes, _) = load_scenes(gt, config)?;
    let truth: Vec<(String, Vec<[f64; 2]>)> = scenes
        .iter()
        .map(|s| (s.scene_id.clone(), s.target.future.iter().map(|p| p.position()).collect()))
        .collect();
    let sets: Vec<_> = preds
        .iter()
        .map(|p| (p.scene_id.clone(), p.prediction.clone()))
        .collect();
    let report = evaluate_by_id(&sets, &truth, &config.horizon, &config.eval_k)?;
    let table = report.to_table(&format!("{} predictions", config.mode));
    if let Some(o) = out {
        write_file(o, report.to_json())?;
    }
    if let Some(dir) = svg_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for p in &preds {
            let scene = scenes.iter().find(|s| s.scene_id == p.scene_id).expect("ids matched above");
            let name: String = p
                .scene_id
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect();
            write_file(&dir.join(format!("{name}.svg")), svg::overlay(scene, p))?;
        }
    }
    Ok((report, table))
}

/// Scene kinds accepted by `simulate`: one of the scenario names or `mixed`.
pub fn parse_kind(s: &str) -> Result<Option<ScenarioKind>> {
    if s == "mixed" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(CliError::Usage)
}

/// Generates `count` scenes and writes `scenes.csv` plus `controls.json`
/// (the exact target controls per scene id). Writes nothing for `count = 0`.
pub fn cmd_simulate(config: &Config, kind: Option<ScenarioKind>, count: usize, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let scenes = match kind {
        None => synth_mixed(count, config.synth.noise_std, seed, &config.attrs, &config.horizon),
        Some(k) => (0..count as u64)
            .map(|i| {
                synth_scenario(
                    k,
                    config.synth.noise_std,
                    seed.wrapping_mul(1_000_003).wrapping_add(i),
                    &config.attrs,
                    &config.horizon,
                )
            })
            .collect(),
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let csv_path = out_dir.join("scenes.csv");
    let mut buf = Vec::new();
    let plain: Vec<Scene> = scenes.iter().map(|s| s.scene.clone()).collect();
    write_trajectory_csv(&plain, &mut buf)?;
    write_file(&csv_path, buf)?;
    let controls: std::collections::BTreeMap<&str, _> = scenes
        .iter()
        .map(|s| (s.scene.scene_id.as_str(), &s.controls))
        .collect();
    let ctrl_path = out_dir.join("controls.json");
    write_file(&ctrl_path, serde_json::to_string_pretty(&controls)?)?;
    Ok(vec![csv_path, ctrl_path])
}

/// Runs the invariant suite. The matrix is returned even when a check
/// fails; the error then names the failing checks.
pub fn cmd_verify(opts: SuiteOptions) -> (Vec<CheckOutcome>, String, Result<()>) {
    let outcomes = run_suite(opts);
    let matrix = format_matrix(&outcomes);
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.name.as_str())
        .collect();
    let status = if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::VerifyFailed(failed.join(", ")))
    };
    (outcomes, matrix, status)
}

/// Worker count from `DEMO_THREADS`, if set.
pub fn threads_from_env(value: Option<&str>) -> Result<Option<usize>> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("DEMO_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}
