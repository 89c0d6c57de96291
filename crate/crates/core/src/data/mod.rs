//! Scenes, ingestion, the synthetic scenario generator, splits and config.

pub mod config;
pub mod ingest;
pub mod split;
pub mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{KinematicState, VehicleAttributes};

pub use config::{Config, ConfigError, Mode};
pub use ingest::{load_trajectory_csv, read_trajectory_csv, write_trajectory_csv, IngestOptions};
pub use split::split;
pub use synth::{synth_mixed, synth_scenario, ScenarioKind, SynthScene};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    MalformedRow { line: usize, msg: String },
    #[error("scene {0} has no target vehicle")]
    MissingTarget(String),
    #[error("scene {0} has more than one target vehicle")]
    MultipleTargets(String),
    #[error("scene {scene}: frames of vehicle {vehicle} are not consecutive")]
    IrregularTimestep { scene: String, vehicle: String },
    #[error("split ratios {0:?} must be nonnegative and sum to 1")]
    BadRatios([f64; 3]),
    #[error("invalid horizon: {0}")]
    BadHorizon(String),
    #[error("scene {scene}: {msg}")]
    InvalidScene { scene: String, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// History, future and short-term horizons in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonSpec {
    pub t_p_s: f64,
    pub t_f_s: f64,
    pub t_s_s: f64,
    pub dt_s: f64,
}

fn whole_steps(span: f64, dt: f64) -> Option<usize> {
    let n = span / dt;
    let r = n.round();
    ((n - r).abs() < 1e-9 && r >= 1.0).then_some(r as usize)
}

impl HorizonSpec {
    pub const HIGHWAY: HorizonSpec = HorizonSpec {
        t_p_s: 3.0,
        t_f_s: 5.0,
        t_s_s: 2.0,
        dt_s: 0.2,
    };

    pub const NUSCENES: HorizonSpec = HorizonSpec {
        t_p_s: 2.0,
        t_f_s: 6.0,
        t_s_s: 2.0,
        dt_s: 0.5,
    };

    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.dt_s > 0.0 && self.dt_s <= 1.0) {
            return Err(DataError::BadHorizon(format!("dt_s = {}", self.dt_s)));
        }
        if self.t_s_s > self.t_f_s {
            return Err(DataError::BadHorizon("t_s_s exceeds t_f_s".into()));
        }
        for (name, v) in [
            ("t_p_s", self.t_p_s),
            ("t_f_s", self.t_f_s),
            ("t_s_s", self.t_s_s),
        ] {
            if whole_steps(v, self.dt_s).is_none() {
                return Err(DataError::BadHorizon(format!(
                    "{name} = {v} is not a positive multiple of dt_s = {}",
                    self.dt_s
                )));
            }
        }
        Ok(())
    }

    pub fn t_p_steps(&self) -> usize {
        whole_steps(self.t_p_s, self.dt_s).expect("validated horizon")
    }

    pub fn t_f_steps(&self) -> usize {
        whole_steps(self.t_f_s, self.dt_s).expect("validated horizon")
    }

    pub fn t_s_steps(&self) -> usize {
        whole_steps(self.t_s_s, self.dt_s).expect("validated horizon")
    }

    /// Step index (1-based into the future) of the given second.
    pub fn step_of_second(&self, second: u32) -> Option<usize> {
        whole_steps(second as f64, self.dt_s).filter(|&k| k <= self.t_f_steps())
    }
}

/// One vehicle's samples around the prediction time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub vehicle_id: String,
    pub history: Vec<KinematicState>,
    pub future: Vec<KinematicState>,
    /// `future_mask[k]` is false where the vehicle was not observed;
    /// the stored row is then a copy of the last observed state.
    pub future_mask: Vec<bool>,
}

impl Track {
    pub fn new(vehicle_id: impl Into<String>, history: Vec<KinematicState>, future: Vec<KinematicState>) -> Self {
        let future_mask = vec![true; future.len()];
        Self {
            vehicle_id: vehicle_id.into(),
            history,
            future,
            future_mask,
        }
    }

    pub fn last(&self) -> KinematicState {
        *self.history.last().expect("nonempty history")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub dt_s: f64,
    pub target: Track,
    pub surroundings: Vec<Track>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_polylines: Option<Vec<Vec<[f64; 2]>>>,
    pub attrs: VehicleAttributes,
}

impl Scene {
    pub fn has_future(&self) -> bool {
        !self.target.future.is_empty()
    }

    pub fn num_vehicles(&self) -> usize {
        1 + self.surroundings.len()
    }

    /// Target first, then surroundings in stored order.
    pub fn tracks(&self) -> impl Iterator<Item = &Track> {
        std::iter::once(&self.target).chain(&self.surroundings)
    }

    pub fn validate(&self, horizon: &HorizonSpec, require_future: bool) -> Result<(), DataError> {
        let bad = |msg: String| DataError::InvalidScene {
            scene: self.scene_id.clone(),
            msg,
        };
        if (self.dt_s - horizon.dt_s).abs() > 1e-9 {
            return Err(bad(format!("dt_s {} differs from {}", self.dt_s, horizon.dt_s)));
        }
        for t in self.tracks() {
            if t.history.len() != horizon.t_p_steps() {
                return Err(bad(format!(
                    "vehicle {} has {} history steps, expected {}",
                    t.vehicle_id,
                    t.history.len(),
                    horizon.t_p_steps()
                )));
            }
            if t.future_mask.len() != t.future.len() {
                return Err(bad(format!("vehicle {} future mask length", t.vehicle_id)));
            }
            if !t.history.iter().chain(&t.future).all(|s| s.is_finite()) {
                return Err(bad(format!("vehicle {} has non-finite samples", t.vehicle_id)));
            }
        }
        let f = self.target.future.len();
        if (require_future || f > 0) && f != horizon.t_f_steps() {
            return Err(bad(format!(
                "target future has {f} steps, expected {}",
                horizon.t_f_steps()
            )));
        }
        self.attrs
            .validate()
            .map_err(|e| bad(e.to_string()))
    }
}

pub fn write_scenes_json(scenes: &[Scene]) -> Result<String, DataError> {
    Ok(serde_json::to_string_pretty(scenes)?)
}

pub fn read_scenes_json(text: &str) -> Result<Vec<Scene>, DataError> {
    Ok(serde_json::from_str(text)?)
}

pub fn load_scenes_json(path: &Path) -> Result<Vec<Scene>, DataError> {
    read_scenes_json(&std::fs::read_to_string(path)?)
}
