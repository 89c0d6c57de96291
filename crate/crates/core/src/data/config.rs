//! Flat `section.key = value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors so typos do not silently fall back to defaults.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HorizonSpec;
use crate::dynamics::{VehicleAttributes, REG_LAMBDA, STEER_LIMIT, TOL_ROT, V_MIN_FLOOR};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: bad value `{value}` for `{key}`")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Highway,
    Nuscenes,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "highway" => Ok(Mode::Highway),
            "nuscenes" => Ok(Mode::Nuscenes),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Highway => "highway",
            Mode::Nuscenes => "nuscenes",
        })
    }
}

impl Mode {
    pub fn default_horizon(self) -> HorizonSpec {
        match self {
            Mode::Highway => HorizonSpec::HIGHWAY,
            Mode::Nuscenes => HorizonSpec::NUSCENES,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub v_min_floor: f64,
    pub steer_limit: f64,
    pub accel_limit: f64,
    pub reg_lambda: f64,
    pub tol_rot: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self {
            v_min_floor: V_MIN_FLOOR,
            steer_limit: STEER_LIMIT,
            accel_limit: 8.0,
            reg_lambda: REG_LAMBDA,
            tol_rot: TOL_ROT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub z_dim: usize,
    pub num_blocks: usize,
    pub scan_state: usize,
    pub score_hidden: usize,
    pub n_max: usize,
    pub graph_radius_m: f64,
    pub polyline_points: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            z_dim: 16,
            num_blocks: 2,
            scan_state: 8,
            score_hidden: 9,
            n_max: 8,
            graph_radius_m: 50.0,
            polyline_points: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_kl: f64,
    pub w_di: f64,
    pub w_ce: f64,
    pub w_ac: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_kl: 0.5,
            w_di: 1.0,
            w_ce: 1.0,
            w_ac: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let w = [self.w_kl, self.w_di, self.w_ce, self.w_ac];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().all(|v| *v == 0.0) {
            return Err(ConfigError::Invalid(format!(
                "loss weights {w:?} must be nonnegative with at least one positive"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub split: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            lr_init: 1e-3,
            lr_min: 1e-5,
            weight_decay: 0.01,
            weights: LossWeights::default(),
            split: [0.7, 0.1, 0.2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 200,
            noise_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub mode: Mode,
    pub seed: u64,
    pub horizon: HorizonSpec,
    pub attrs: VehicleAttributes,
    pub dynamics: DynamicsParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub stride_frames: usize,
    pub eval_k: Vec<usize>,
}

impl Default for Config {
    fn default() -> Self {
        Self::for_mode(Mode::Highway)
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl Config {
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            mode,
            seed: 7,
            horizon: mode.default_horizon(),
            attrs: VehicleAttributes::default(),
            dynamics: DynamicsParams::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            stride_frames: 5,
            eval_k: vec![1, 6],
        }
    }

    /// Parses config text. `mode` (if given) takes precedence over a
    /// `mode = ...` line; horizon defaults follow the resulting mode.
    pub fn parse(text: &str, mode: Option<Mode>) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            entries.push((i + 1, k.trim(), v.trim()));
        }
        let file_mode = entries
            .iter()
            .find(|(_, k, _)| *k == "mode")
            .map(|&(line, k, v)| parse_value::<Mode>(line, k, v))
            .transpose()?;
        let mut cfg = Self::for_mode(mode.or(file_mode).unwrap_or_default());
        for (line, key, value) in entries {
            cfg.set(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, mode: Option<Mode>) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?, mode)
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        let f = |v: &str| parse_value::<f64>(line, key, v);
        let u = |v: &str| parse_value::<usize>(line, key, v);
        match key {
            "mode" => {}
            "seed" => self.seed = parse_value(line, key, value)?,
            "horizon.dt_s" => self.horizon.dt_s = f(value)?,
            "horizon.t_p_s" => self.horizon.t_p_s = f(value)?,
            "horizon.t_f_s" => self.horizon.t_f_s = f(value)?,
            "horizon.t_s_s" => self.horizon.t_s_s = f(value)?,
            "dynamics.mass_kg" => self.attrs.mass_kg = f(value)?,
            "dynamics.yaw_inertia_kg_m2" => self.attrs.yaw_inertia_kg_m2 = f(value)?,
            "dynamics.dist_cg_front_m" => self.attrs.dist_cg_front_m = f(value)?,
            "dynamics.dist_cg_rear_m" => self.attrs.dist_cg_rear_m = f(value)?,
            "dynamics.cornering_stiffness_front_n_per_rad" => {
                self.attrs.cornering_stiffness_front_n_per_rad = f(value)?
            }
            "dynamics.cornering_stiffness_rear_n_per_rad" => {
                self.attrs.cornering_stiffness_rear_n_per_rad = f(value)?
            }
            "dynamics.v_min_floor" => self.dynamics.v_min_floor = f(value)?,
            "dynamics.steer_limit" => self.dynamics.steer_limit = f(value)?,
            "dynamics.accel_limit" => self.dynamics.accel_limit = f(value)?,
            "dynamics.reg_lambda" => self.dynamics.reg_lambda = f(value)?,
            "dynamics.tol_rot" => self.dynamics.tol_rot = f(value)?,
            "model.d_model" => self.model.d_model = u(value)?,
            "model.z_dim" => self.model.z_dim = u(value)?,
            "model.num_blocks" => self.model.num_blocks = u(value)?,
            "model.scan_state" => self.model.scan_state = u(value)?,
            "model.score_hidden" => self.model.score_hidden = u(value)?,
            "model.n_max" => self.model.n_max = u(value)?,
            "model.graph_radius_m" => self.model.graph_radius_m = f(value)?,
            "model.polyline_points" => self.model.polyline_points = u(value)?,
            "train.epochs" => self.train.epochs = u(value)?,
            "train.batch_size" => self.train.batch_size = u(value)?,
            "train.lr_init" => self.train.lr_init = f(value)?,
            "train.lr_min" => self.train.lr_min = f(value)?,
            "train.weight_decay" => self.train.weight_decay = f(value)?,
            "train.w_kl" => self.train.weights.w_kl = f(value)?,
            "train.w_di" => self.train.weights.w_di = f(value)?,
            "train.w_ce" => self.train.weights.w_ce = f(value)?,
            "train.w_ac" => self.train.weights.w_ac = f(value)?,
            "train.split" => {
                let parts = value
                    .split(',')
                    .map(|p| f(p.trim()))
                    .collect::<Result<Vec<_>, _>>()?;
                self.train.split = parts.try_into().map_err(|_| ConfigError::BadValue {
                    line,
                    key: key.to_string(),
                    value: value.to_string(),
                })?;
            }
            "synth.count" => self.synth.count = u(value)?,
            "synth.noise_std" => self.synth.noise_std = f(value)?,
            "data.stride_frames" => self.stride_frames = u(value)?,
            "eval.k" => {
                self.eval_k = value
                    .split(',')
                    .map(|p| u(p.trim()))
                    .collect::<Result<_, _>>()?
            }
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.horizon
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.attrs
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.weights.validate()?;
        let m = &self.model;
        if m.d_model == 0 || m.z_dim == 0 || m.num_blocks == 0 || m.scan_state == 0 {
            return invalid("model sizes must be positive".into());
        }
        if m.polyline_points < 2 {
            return invalid("model.polyline_points must be at least 2".into());
        }
        if self.train.batch_size == 0 {
            return invalid("train.batch_size must be positive".into());
        }
        if self.stride_frames == 0 {
            return invalid("data.stride_frames must be positive".into());
        }
        if self.eval_k.is_empty() || self.eval_k.contains(&0) {
            return invalid("eval.k needs positive entries".into());
        }
        if !(self.dynamics.v_min_floor > 0.0 && self.dynamics.steer_limit > 0.0) {
            return invalid("dynamics limits must be positive".into());
        }
        Ok(())
    }

    /// Canonical `key = value` listing that parses back to `self`.
    pub fn to_text(&self) -> String {
        let a = &self.attrs;
        let d = &self.dynamics;
        let m = &self.model;
        let t = &self.train;
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let lines = [
            format!("mode = {}", self.mode),
            format!("seed = {}", self.seed),
            format!("horizon.dt_s = {}", self.horizon.dt_s),
            format!("horizon.t_p_s = {}", self.horizon.t_p_s),
            format!("horizon.t_f_s = {}", self.horizon.t_f_s),
            format!("horizon.t_s_s = {}", self.horizon.t_s_s),
            format!("dynamics.mass_kg = {}", a.mass_kg),
            format!("dynamics.yaw_inertia_kg_m2 = {}", a.yaw_inertia_kg_m2),
            format!("dynamics.dist_cg_front_m = {}", a.dist_cg_front_m),
            format!("dynamics.dist_cg_rear_m = {}", a.dist_cg_rear_m),
            format!(
                "dynamics.cornering_stiffness_front_n_per_rad = {}",
                a.cornering_stiffness_front_n_per_rad
            ),
            format!(
                "dynamics.cornering_stiffness_rear_n_per_rad = {}",
                a.cornering_stiffness_rear_n_per_rad
            ),
            format!("dynamics.v_min_floor = {}", d.v_min_floor),
            format!("dynamics.steer_limit = {}", d.steer_limit),
            format!("dynamics.accel_limit = {}", d.accel_limit),
            format!("dynamics.reg_lambda = {}", d.reg_lambda),
            format!("dynamics.tol_rot = {}", d.tol_rot),
            format!("model.d_model = {}", m.d_model),
            format!("model.z_dim = {}", m.z_dim),
            format!("model.num_blocks = {}", m.num_blocks),
            format!("model.scan_state = {}", m.scan_state),
            format!("model.score_hidden = {}", m.score_hidden),
            format!("model.n_max = {}", m.n_max),
            format!("model.graph_radius_m = {}", m.graph_radius_m),
            format!("model.polyline_points = {}", m.polyline_points),
            format!("train.epochs = {}", t.epochs),
            format!("train.batch_size = {}", t.batch_size),
            format!("train.lr_init = {}", t.lr_init),
            format!("train.lr_min = {}", t.lr_min),
            format!("train.weight_decay = {}", t.weight_decay),
            format!("train.w_kl = {}", t.weights.w_kl),
            format!("train.w_di = {}", t.weights.w_di),
            format!("train.w_ce = {}", t.weights.w_ce),
            format!("train.w_ac = {}", t.weights.w_ac),
            format!("train.split = {}", join(&t.split)),
            format!("synth.count = {}", self.synth.count),
            format!("synth.noise_std = {}", self.synth.noise_std),
            format!("data.stride_frames = {}", self.stride_frames),
            format!(
                "eval.k = {}",
                self.eval_k
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(",")
            ),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}
