//! The invariant suite: dynamics roundtrips, gradient checks, KL and metric
//! oracles, equivariance and inference latency. Each check returns its raw
//! measurements so callers can apply their own thresholds; [`run_suite`]
//! applies the standard ones.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Config, Mode, Scene, Track};
use crate::decoder::PredictionSet;
use crate::dyn_stage::{gaussian_kl, LatentSource};
use crate::dynamics::{
    continuous_derivative, discrete_step, inverse_controls, rk4_step, ControlInput, DynamicsError,
    FullContinuousState, InverseOptions, KinematicState, StepSpec, VehicleAttributes,
};
use crate::error::ModelError;
use crate::metrics::{min_ade, rmse_at, MetricsError};
use crate::model::DemoModel;
use crate::numkernel::gradcheck::layer_suite;
use crate::numkernel::{KernelError, Tape};

/// Largest errors seen over the roundtrip draws.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RoundtripStats {
    pub pairs: usize,
    pub max_accel_err: f64,
    pub max_yaw_err: f64,
    pub max_vy_err: f64,
}

/// Draws random (state, control) pairs with `|δ| ≤ 0.3`, steps forward and
/// inverts. The recovered `(ω, δ)` are not unique, so the check on them is
/// that they reproduce `v_y` after one more forward step.
pub fn dynamics_roundtrip(pairs: usize, seed: u64) -> Result<RoundtripStats, DynamicsError> {
    let attrs = VehicleAttributes::default();
    let spec = StepSpec::new(0.1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = RoundtripStats {
        pairs,
        ..Default::default()
    };
    for _ in 0..pairs {
        let s = KinematicState::new(
            rng.random_range(-50.0..50.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(2.0..35.0),
            rng.random_range(-1.5..1.5),
        );
        let c = ControlInput::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.3..0.3),
            rng.random_range(-4.0..4.0),
        );
        let next = discrete_step(&s, &c, &attrs, spec)?;
        let inv = inverse_controls(&s, &next, &attrs, spec, InverseOptions::default())?;
        let again = discrete_step(&s, &inv, &attrs, spec)?;
        st.max_accel_err = st.max_accel_err.max((inv.accel_mps2 - c.accel_mps2).abs());
        st.max_yaw_err = st.max_yaw_err.max((inv.yaw_rad - c.yaw_rad).abs());
        st.max_vy_err = st.max_vy_err.max((again.vy_mps - next.vy_mps).abs());
    }
    Ok(st)
}

/// `v_y'` of one step from `(0, 0, 10, 0)` under `(0, 0.1, 0.05, 0)`.
pub fn golden_lateral_speed() -> Result<f64, DynamicsError> {
    let s = KinematicState::new(0.0, 0.0, 10.0, 0.0);
    let c = ControlInput::new(0.0, 0.1, 0.05, 0.0);
    Ok(discrete_step(&s, &c, &VehicleAttributes::default(), StepSpec::new(0.1)?)?.vy_mps)
}

/// Steering profile of the convergence check.
pub fn sinusoidal_steer(t: f64) -> f64 {
    0.02 * (PI * t).sin()
}

/// Maximum position gap over a 2 s horizon between a discrete rollout at
/// each `dt` and a fine RK4 reference of the continuous model. The discrete
/// step gets `φ` and `ω` from the reference at each grid point, and `a`
/// equal to the reference `v̇_x` there, so only the discretization differs.
pub fn convergence_errors(dts: &[f64]) -> Result<Vec<f64>, DynamicsError> {
    const HORIZON_S: f64 = 2.0;
    const SUBSTEPS: usize = 200;
    const ACCEL: f64 = 0.5;
    let attrs = VehicleAttributes::default();
    let init = FullContinuousState {
        kinematic: KinematicState::new(0.0, 0.0, 15.0, 0.0),
        yaw_rad: 0.0,
        yaw_rate_radps: 0.0,
    };
    dts.iter()
        .map(|&dt| {
            let spec = StepSpec::new(dt)?;
            let h = dt / SUBSTEPS as f64;
            let (mut reference, mut disc) = (init, init.kinematic);
            let mut worst: f64 = 0.0;
            for k in 0..(HORIZON_S / dt).round() as usize {
                let t = k as f64 * dt;
                let steer = sinusoidal_steer(t);
                let rate = continuous_derivative(&reference, steer, ACCEL, &attrs)?;
                let c = ControlInput::new(reference.yaw_rad, reference.yaw_rate_radps, steer, rate.vx);
                disc = discrete_step(&disc, &c, &attrs, spec)?;
                for j in 0..SUBSTEPS {
                    reference = rk4_step(&reference, sinusoidal_steer(t + j as f64 * h), ACCEL, &attrs, h)?;
                }
                let gap = (disc.x_m - reference.kinematic.x_m).hypot(disc.y_m - reference.kinematic.y_m);
                worst = worst.max(gap);
            }
            Ok(worst)
        })
        .collect()
}

/// `(|KL(N(1,1)‖N(0,1)) − 0.5|, smallest KL over random pairs)`.
pub fn kl_checks(pairs: usize, seed: u64) -> (f64, f64) {
    let golden = (gaussian_kl(&[1.0], &[0.0], &[0.0], &[0.0]) - 0.5).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min = f64::INFINITY;
    for _ in 0..pairs {
        let dim = rng.random_range(1..=8);
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..dim).map(|_| rng.random_range(lo..hi)).collect() };
        let (mq, lq, mp, lp) = (draw(-3.0, 3.0), draw(-4.0, 2.0), draw(-3.0, 3.0), draw(-4.0, 2.0));
        min = min.min(gaussian_kl(&mq, &lq, &mp, &lp));
    }
    (golden, min)
}

fn line(offset: f64, n: usize) -> Vec<[f64; 2]> {
    (0..n).map(|k| [k as f64, offset]).collect()
}

/// Two scenes whose predictions sit 3 m and 4 m beside the truth at 1 s.
pub fn rmse_fixture() -> Result<f64, MetricsError> {
    let gt = vec![line(0.0, 10), line(0.0, 10)];
    let preds = vec![line(3.0, 10), line(4.0, 10)];
    rmse_at(&preds, &gt, 1, 0.2)
}

/// Three candidates 1, 2 and 3 m off with probabilities 0.3, 0.2, 0.5;
/// the top two are the 3 m and 1 m ones.
pub fn min_ade_fixture() -> Result<f64, MetricsError> {
    let set = PredictionSet {
        trajectories: vec![line(1.0, 5), line(2.0, 5), line(3.0, 5)],
        maneuver_probs: vec![0.3, 0.2, 0.5],
    };
    min_ade(&set, &line(0.0, 5), 2)
}

/// Number of random prediction sets whose `min_ade` grows somewhere as `K`
/// increases from 1 to 6.
pub fn min_ade_monotonicity_violations(sets: usize, seed: u64) -> Result<usize, MetricsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..sets {
        let steps = rng.random_range(1..=25);
        let mut traj = || -> Vec<[f64; 2]> {
            (0..steps)
                .map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-5.0..5.0)])
                .collect()
        };
        let gt = traj();
        let trajectories: Vec<_> = (0..6).map(|_| traj()).collect();
        let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let set = PredictionSet {
            trajectories,
            maneuver_probs: raw.iter().map(|p| p / total).collect(),
        };
        let ades = (1..=6).map(|k| min_ade(&set, &gt, k)).collect::<Result<Vec<_>, _>>()?;
        if ades.windows(2).any(|w| w[1] > w[0]) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// A highway scene: target at the origin and `surroundings` vehicles in the
/// neighbouring lanes, all with gentle random accelerations and drifts.
pub fn random_scene(config: &Config, surroundings: usize, rng: &mut ChaCha8Rng) -> Scene {
    let h = &config.horizon;
    let (t_p, t_f) = (h.t_p_steps(), h.t_f_steps());
    let dt = h.dt_s;
    let mut track = |id: String, x0: f64, y0: f64| -> Track {
        let v = rng.random_range(12.0..28.0);
        let a = rng.random_range(-0.5..0.5);
        let drift = rng.random_range(-0.4..0.4);
        let states: Vec<KinematicState> = (0..t_p + t_f)
            .map(|k| {
                let t = k as f64 * dt;
                KinematicState::new(x0 + v * t + 0.5 * a * t * t, y0 + drift * t, v + a * t, 0.0)
            })
            .collect();
        Track::new(id, states[..t_p].to_vec(), states[t_p..].to_vec())
    };
    let target = track("target".into(), 0.0, 0.0);
    let others = (0..surroundings)
        .map(|i| {
            let lane = (i % 3) as f64 - 1.0;
            let x0 = -40.0 + 80.0 * (i as f64 + 0.5) / surroundings as f64;
            track(format!("s{}", i + 1), x0, lane * 3.6 + 0.2)
        })
        .collect();
    Scene {
        scene_id: format!("random-{surroundings}"),
        dt_s: dt,
        target,
        surroundings: others,
        map_polylines: Some(
            (-1..=2)
                .map(|l| vec![[-100.0, (l as f64 - 0.5) * 3.6], [200.0, (l as f64 - 0.5) * 3.6]])
                .collect(),
        ),
        attrs: config.attrs,
    }
}

/// Largest deviation when the surrounding vehicles are listed in a random
/// order: interaction rows must follow the permutation and the target's
/// prediction must not move.
pub fn permutation_equivariance(model: &DemoModel, scenes: usize, seed: u64) -> Result<f64, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..scenes {
        let n_sur = rng.random_range(2..=8);
        let scene = random_scene(&model.config, n_sur, &mut rng);
        let mut perm: Vec<usize> = (0..n_sur).collect();
        for i in (1..n_sur).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut shuffled = scene.clone();
        shuffled.surroundings = perm.iter().map(|&i| scene.surroundings[i].clone()).collect();

        let run = |s: &Scene| -> Result<(Tape, crate::model::ForwardPass), ModelError> {
            let prep = model.prepare(s);
            let mut tape = Tape::inference();
            let pass = model.forward(&mut tape, &prep, LatentSource::Mean)?;
            Ok((tape, pass))
        };
        let (ta, a) = run(&scene)?;
        let (tb, b) = run(&shuffled)?;
        let (ia, ib) = (ta.value(a.interaction.interaction), tb.value(b.interaction.interaction));
        // row 0 is the target; row 1 + new holds surrounding vehicle perm[new]
        let rows = std::iter::once((0, 0)).chain(perm.iter().enumerate().map(|(new, &old)| (old + 1, new + 1)));
        for (ra, rb) in rows {
            for (x, y) in ia.row_slice(ra).iter().zip(ib.row_slice(rb)) {
                worst = worst.max((x - y).abs());
            }
        }
        let (pa, pb) = (a.decoder.prediction(&ta), b.decoder.prediction(&tb));
        for (x, y) in pa.trajectories.iter().flatten().zip(pb.trajectories.iter().flatten()) {
            worst = worst.max((x[0] - y[0]).abs()).max((x[1] - y[1]).abs());
        }
    }
    Ok(worst)
}

fn rotate(p: [f64; 2], theta: f64) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Largest gap between `step(R·s, φ + θ)` and `R·step(s, φ)`. Rotating the
/// world frame moves positions and yaw; body-frame velocities are unchanged.
pub fn frame_equivariance(cases: usize, seed: u64) -> Result<f64, DynamicsError> {
    let attrs = VehicleAttributes::default();
    let spec = StepSpec::new(0.1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let s = KinematicState::new(
            rng.random_range(-50.0..50.0),
            rng.random_range(-50.0..50.0),
            rng.random_range(2.0..35.0),
            rng.random_range(-1.5..1.5),
        );
        let c = ControlInput::new(
            rng.random_range(-PI..PI),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.3..0.3),
            rng.random_range(-4.0..4.0),
        );
        let theta = rng.random_range(-PI..PI);
        let p = rotate(s.position(), theta);
        let rs = KinematicState::new(p[0], p[1], s.vx_mps, s.vy_mps);
        let rc = ControlInput::new(c.yaw_rad + theta, c.yaw_rate_radps, c.steer_rad, c.accel_mps2);
        let a = discrete_step(&rs, &rc, &attrs, spec)?;
        let b = discrete_step(&s, &c, &attrs, spec)?;
        let rb = rotate(b.position(), theta);
        worst = worst
            .max((a.x_m - rb[0]).abs())
            .max((a.y_m - rb[1]).abs())
            .max((a.vx_mps - b.vx_mps).abs())
            .max((a.vy_mps - b.vy_mps).abs());
    }
    Ok(worst)
}

/// Wall-clock latency of `DemoModel::predict` on a scene with eight
/// surrounding vehicles: median and maximum over `runs` after one warm-up.
pub fn inference_latency(model: &DemoModel, runs: usize) -> Result<(Duration, Duration), ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let scene = random_scene(&model.config, 8, &mut rng);
    model.predict(&scene)?;
    let mut times = Vec::with_capacity(runs.max(1));
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        std::hint::black_box(model.predict(&scene)?);
        times.push(t.elapsed());
    }
    times.sort();
    Ok((times[times.len() / 2], *times.last().expect("at least one run")))
}

/// One line of the pass/fail matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SuiteOptions {
    /// Breaks every layer's backward pass before the gradient checks.
    pub inject_gradient_fault: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const LATENCY_BUDGET: Duration = Duration::from_millis(50);

fn timed<F>(name: &str, f: F) -> CheckOutcome
where
    F: FnOnce() -> Result<(bool, String), VerifyError>,
{
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
        elapsed: t.elapsed(),
    }
}

/// Runs every check with its standard threshold.
pub fn run_suite(opts: SuiteOptions) -> Vec<CheckOutcome> {
    let mut out = vec![
        timed("dynamics roundtrip", || {
            let s = dynamics_roundtrip(10_000, 1)?;
            let worst = s.max_accel_err.max(s.max_yaw_err).max(s.max_vy_err);
            Ok((worst <= 1e-9, format!("{} pairs, max err {worst:.1e}", s.pairs)))
        }),
        timed("golden step", || {
            let vy = golden_lateral_speed()?;
            let err = (vy - 3900.0 / 35000.0).abs();
            Ok((err <= 1e-12, format!("vy' = {vy:.9}, err {err:.1e}")))
        }),
        timed("convergence order", || {
            let e = convergence_errors(&[0.1, 0.05, 0.025])?;
            let r = [e[0] / e[1], e[1] / e[2]];
            let ok = r.iter().all(|x| (1.5..=2.5).contains(x));
            Ok((ok, format!("ratios {:.3}, {:.3}", r[0], r[1])))
        }),
        timed("layer gradients", || {
            let checks = layer_suite(10, 1e-6, opts.inject_gradient_fault)?;
            let failed: Vec<&str> = checks
                .iter()
                .filter(|c| !c.report.passes(1e-4))
                .map(|c| c.layer.as_str())
                .collect();
            let worst = checks.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
            let detail = if failed.is_empty() {
                format!("{} layers, max rel err {worst:.1e}", checks.len())
            } else {
                format!("failing: {}", failed.join(", "))
            };
            Ok((failed.is_empty(), detail))
        }),
        timed("gaussian kl", || {
            let (golden, min) = kl_checks(1000, 5);
            Ok((golden <= 1e-12 && min >= 0.0, format!("golden err {golden:.1e}, min {min:.2e}")))
        }),
        timed("metric oracles", || {
            let r = rmse_fixture()?;
            let m = min_ade_fixture()?;
            let bad = min_ade_monotonicity_violations(1000, 3)?;
            let ok = (r - 3.5355).abs() <= 1e-4 && m == 1.0 && bad == 0;
            Ok((ok, format!("rmse {r:.4}, minADE {m}, {bad} monotonicity violations")))
        }),
        timed("frame equivariance", || {
            let e = frame_equivariance(100, 8)?;
            Ok((e <= 1e-9, format!("max err {e:.1e}")))
        }),
    ];
    let model = DemoModel::new(&Config::for_mode(Mode::Highway));
    out.push(timed("permutation equivariance", || {
        let m = model.as_ref().map_err(|e| ModelError::LengthMismatch(e.to_string()))?;
        let e = permutation_equivariance(m, 100, 4)?;
        Ok((e <= 1e-9, format!("max err {e:.1e}")))
    }));
    out.push(timed("inference latency", || {
        let m = model.as_ref().map_err(|e| ModelError::LengthMismatch(e.to_string()))?;
        let (median, max) = inference_latency(m, 11)?;
        Ok((
            median < LATENCY_BUDGET,
            format!(
                "median {:.2} ms, max {:.2} ms, 8 surrounding vehicles",
                median.as_secs_f64() * 1e3,
                max.as_secs_f64() * 1e3
            ),
        ))
    }));
    out
}

/// Fixed-width pass/fail matrix.
pub fn format_matrix(outcomes: &[CheckOutcome]) -> String {
    let mut s = String::new();
    for o in outcomes {
        s.push_str(&format!(
            "{:<5} {:<26} {:>9.1} ms  {}\n",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.elapsed.as_secs_f64() * 1e3,
            o.detail
        ));
    }
    s
}
