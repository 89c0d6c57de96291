//! Synthetic scenes rolled out through the discrete bicycle model.
//!
//! Every vehicle starts on a straight road heading along +x (+y is left).
//! The target's maneuver starts 0.4 to 1.5 s before the prediction time so
//! that part of it is visible in the history.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{HorizonSpec, Scene, Track};
use crate::dynamics::{
    discrete_step, ControlInput, KinematicState, StepSpec, VehicleAttributes,
};

pub const LANE_WIDTH_M: f64 = 3.6;
const LANE_CHANGE_S: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Straight,
    LaneChangeLeft,
    LaneChangeRight,
    Turn,
    Brake,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::Straight,
        ScenarioKind::LaneChangeLeft,
        ScenarioKind::LaneChangeRight,
        ScenarioKind::Turn,
        ScenarioKind::Brake,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::LaneChangeLeft => "lane_change_left",
            ScenarioKind::LaneChangeRight => "lane_change_right",
            ScenarioKind::Turn => "turn",
            ScenarioKind::Brake => "brake",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown scenario kind `{s}`"))
    }
}

/// A generated scene with the exact target controls that produced it
/// (`t_p + t_f − 1` of them, one per transition).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub kind: ScenarioKind,
    pub scene: Scene,
    pub controls: Vec<ControlInput>,
}

enum Profile {
    Cruise { accel: f64 },
    LaneChange { onset: f64, amp: f64, accel: f64 },
    Turn { onset: f64, yaw_rate: f64 },
    Brake { onset: f64, decel: f64 },
}

fn rollout_profile(
    init: KinematicState,
    profile: &Profile,
    attrs: &VehicleAttributes,
    dt: f64,
    steps: usize,
) -> (Vec<KinematicState>, Vec<ControlInput>) {
    let spec = StepSpec::new(dt).expect("horizon dt validated");
    let wheelbase = attrs.dist_cg_front_m + attrs.dist_cg_rear_m;
    let mut states = vec![init];
    let mut controls = Vec::with_capacity(steps);
    let mut yaw = 0.0;
    for k in 0..steps {
        let t = k as f64 * dt;
        let s = states[k];
        let (phi, omega, accel) = match *profile {
            Profile::Cruise { accel } => (0.0, 0.0, accel),
            Profile::LaneChange { onset, amp, accel } => {
                let tau = (t - onset) / LANE_CHANGE_S;
                if (0.0..=1.0).contains(&tau) {
                    let arg = std::f64::consts::PI * tau;
                    (
                        amp * arg.sin(),
                        amp * std::f64::consts::PI / LANE_CHANGE_S * arg.cos(),
                        accel,
                    )
                } else {
                    (0.0, 0.0, accel)
                }
            }
            Profile::Turn { onset, yaw_rate } => {
                let w = if t >= onset { yaw_rate } else { 0.0 };
                let phi = yaw;
                yaw += w * dt;
                (phi, w, 0.0)
            }
            Profile::Brake { onset, decel } => {
                let a = if t >= onset && s.vx_mps - decel * dt > 3.0 {
                    -decel
                } else {
                    0.0
                };
                (0.0, 0.0, a)
            }
        };
        let c = ControlInput::new(phi, omega, wheelbase * omega / s.vx_mps, accel);
        let next = discrete_step(&s, &c, attrs, spec)
            .expect("synthetic profiles keep speed above the floor");
        controls.push(c);
        states.push(next);
    }
    (states, controls)
}

fn build_profile(kind: ScenarioKind, rng: &mut ChaCha8Rng, t_c: f64, v0: f64) -> (Profile, f64) {
    let onset = (t_c - rng.random_range(0.4..1.5)).max(0.0);
    match kind {
        ScenarioKind::Straight => (
            Profile::Cruise {
                accel: rng.random_range(-0.3..0.3),
            },
            0.0,
        ),
        ScenarioKind::LaneChangeLeft | ScenarioKind::LaneChangeRight => {
            let sign = if kind == ScenarioKind::LaneChangeLeft { 1.0 } else { -1.0 };
            let disp = rng.random_range(3.2..4.2);
            // ∫ v·A·sin(πτ) dt over the maneuver ≈ 2·v·A·T/π
            let amp = disp * std::f64::consts::PI / (2.0 * v0 * LANE_CHANGE_S);
            (
                Profile::LaneChange {
                    onset,
                    amp: sign * amp,
                    accel: rng.random_range(-0.3..0.3),
                },
                sign * disp,
            )
        }
        ScenarioKind::Turn => {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (
                Profile::Turn {
                    onset,
                    yaw_rate: sign * rng.random_range(0.05..0.12),
                },
                0.0,
            )
        }
        ScenarioKind::Brake => (
            Profile::Brake {
                onset,
                decel: rng.random_range(2.0..4.0),
            },
            0.0,
        ),
    }
}

fn target_rollout(
    kind: ScenarioKind,
    rng: &mut ChaCha8Rng,
    attrs: &VehicleAttributes,
    horizon: &HorizonSpec,
) -> (Vec<KinematicState>, Vec<ControlInput>) {
    let (t_p, t_f) = (horizon.t_p_steps(), horizon.t_f_steps());
    let steps = t_p + t_f - 1;
    let dt = horizon.dt_s;
    let v0 = rng.random_range(12.0..28.0);
    let init = KinematicState::new(0.0, 0.0, v0, 0.0);
    let t_c = (t_p - 1) as f64 * dt;
    let (mut profile, want) = build_profile(kind, rng, t_c, v0);
    let (mut states, mut controls) = rollout_profile(init, &profile, attrs, dt, steps);
    if let Profile::LaneChange { amp, .. } = &mut profile {
        // one calibration pass so the net lateral shift hits the drawn value
        let got = states.last().expect("rollout").y_m - init.y_m;
        if got.abs() > 1e-6 {
            *amp *= want / got;
            (states, controls) = rollout_profile(init, &profile, attrs, dt, steps);
        }
    }
    (states, controls)
}

fn add_noise(states: &mut [KinematicState], noise: Option<&Normal<f64>>, rng: &mut ChaCha8Rng) {
    if let Some(n) = noise {
        for s in states {
            s.x_m += n.sample(rng);
            s.y_m += n.sample(rng);
        }
    }
}

fn split_track(id: &str, states: Vec<KinematicState>, t_p: usize) -> Track {
    let mut history = states;
    let future = history.split_off(t_p);
    Track::new(id, history, future)
}

/// Generates one scene. Identical arguments give bit-identical scenes.
pub fn synth_scenario(
    kind: ScenarioKind,
    noise_std: f64,
    seed: u64,
    attrs: &VehicleAttributes,
    horizon: &HorizonSpec,
) -> SynthScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_p, t_f) = (horizon.t_p_steps(), horizon.t_f_steps());
    let (mut target, controls) = target_rollout(kind, &mut rng, attrs, horizon);

    let n_sur = rng.random_range(0..=3usize);
    let mut others = Vec::with_capacity(n_sur);
    for i in 0..n_sur {
        let lane = rng.random_range(-1i32..=1) as f64;
        let x0 = loop {
            let x: f64 = rng.random_range(-40.0..40.0);
            if lane != 0.0 || x.abs() > 15.0 {
                break x;
            }
        };
        let v0 = rng.random_range(12.0..28.0);
        let profile = Profile::Cruise {
            accel: rng.random_range(-0.3..0.3),
        };
        let (states, _) = rollout_profile(
            KinematicState::new(x0, lane * LANE_WIDTH_M, v0, 0.0),
            &profile,
            attrs,
            horizon.dt_s,
            t_p + t_f - 1,
        );
        others.push((format!("s{}", i + 1), states));
    }

    let noise = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("finite std"));
    add_noise(&mut target, noise.as_ref(), &mut rng);
    for (_, s) in &mut others {
        add_noise(s, noise.as_ref(), &mut rng);
    }

    SynthScene {
        kind,
        scene: Scene {
            scene_id: format!("{kind}-{seed}"),
            dt_s: horizon.dt_s,
            target: split_track("target", target, t_p),
            surroundings: others
                .into_iter()
                .map(|(id, s)| split_track(&id, s, t_p))
                .collect(),
            map_polylines: None,
            attrs: *attrs,
        },
        controls,
    }
}

/// `count` scenes cycling through all kinds; scene `i` uses seed
/// `seed · 1_000_003 + i`.
pub fn synth_mixed(
    count: usize,
    noise_std: f64,
    seed: u64,
    attrs: &VehicleAttributes,
    horizon: &HorizonSpec,
) -> Vec<SynthScene> {
    (0..count)
        .map(|i| {
            let kind = ScenarioKind::ALL[i % ScenarioKind::ALL.len()];
            synth_scenario(
                kind,
                noise_std,
                seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                attrs,
                horizon,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::rollout;

    fn gen(kind: ScenarioKind, noise: f64, seed: u64) -> SynthScene {
        synth_scenario(
            kind,
            noise,
            seed,
            &VehicleAttributes::default(),
            &HorizonSpec::HIGHWAY,
        )
    }

    #[test]
    fn noiseless_straight_is_exact_rollout() {
        let s = gen(ScenarioKind::Straight, 0.0, 1);
        let h = &s.scene.target.history;
        let spec = StepSpec::new(0.2).unwrap();
        let states = rollout(&h[0], &s.controls, &s.scene.attrs, spec).unwrap();
        assert_eq!(states[..14], h[1..]);
        assert_eq!(states[14..], s.scene.target.future[..]);
        assert_eq!(s.controls.len(), 39);
    }

    #[test]
    fn same_seed_same_scene() {
        for kind in ScenarioKind::ALL {
            assert_eq!(gen(kind, 0.1, 5), gen(kind, 0.1, 5));
        }
        assert_ne!(gen(ScenarioKind::Turn, 0.1, 5), gen(ScenarioKind::Turn, 0.1, 6));
    }

    #[test]
    fn lane_change_shift_is_one_lane() {
        for seed in 0..50 {
            for (kind, sign) in [
                (ScenarioKind::LaneChangeLeft, 1.0),
                (ScenarioKind::LaneChangeRight, -1.0),
            ] {
                let s = gen(kind, 0.0, seed);
                let t = &s.scene.target;
                let dy = t.future.last().unwrap().y_m - t.history[0].y_m;
                assert!((3.0..=4.5).contains(&(sign * dy)), "seed {seed}: {dy}");
            }
        }
    }

    #[test]
    fn maneuver_starts_inside_history() {
        for seed in 0..20 {
            let s = gen(ScenarioKind::LaneChangeLeft, 0.0, seed);
            let first_active = s.controls.iter().position(|c| c.yaw_rad != 0.0).unwrap();
            // onset between 0.4 s and 1.5 s before t_c = 2.8 s
            let t = first_active as f64 * 0.2;
            assert!((1.2..=2.6).contains(&t), "onset {t}");
        }
    }

    #[test]
    fn brake_keeps_speed_positive() {
        for seed in 0..20 {
            let s = gen(ScenarioKind::Brake, 0.0, seed);
            assert!(s.scene.target.future.iter().all(|x| x.vx_mps > 3.0));
        }
    }

    #[test]
    fn steering_within_limit() {
        for kind in ScenarioKind::ALL {
            for seed in 0..10 {
                let s = gen(kind, 0.0, seed);
                assert!(s.controls.iter().all(|c| c.steer_rad.abs() <= 0.6));
            }
        }
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in ScenarioKind::ALL {
            assert_eq!(k.as_str().parse::<ScenarioKind>().unwrap(), k);
        }
        assert!("zigzag".parse::<ScenarioKind>().is_err());
    }
}
