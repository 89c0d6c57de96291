//! Scene preprocessing shared by the learning stages.
//!
//! Everything downstream works in the target frame: origin at the target's
//! last history position, +x along its estimated heading. Body-frame
//! velocities are unchanged by the transform.

use crate::data::{HorizonSpec, Scene};
use crate::dynamics::{KinematicState, VehicleAttributes};
use crate::numkernel::Tensor;

/// Per-field scale and shift applied to `[x, y, v_x, v_y]` before any layer.
pub const STATE_SCALE: [f64; 4] = [1.0 / 30.0, 1.0 / 4.0, 1.0 / 10.0, 1.0];
pub const STATE_SHIFT: [f64; 4] = [0.0, 0.0, -1.5, 0.0];
/// Scale for `[φ − φ₀, ω, δ, a]`.
pub const CONTROL_SCALE: [f64; 4] = [5.0, 5.0, 10.0, 1.0 / 3.0];
/// Steps used for the heading estimate of the scene frame.
pub const HEADING_WINDOW: usize = 5;

pub fn normalize_state(s: &KinematicState) -> [f64; 4] {
    let a = s.to_array();
    std::array::from_fn(|i| a[i] * STATE_SCALE[i] + STATE_SHIFT[i])
}

/// Heading from the displacement over the last `window` steps, minus the
/// sideslip `atan2(v_y, v_x)` of the last sample.
pub fn heading_estimate(history: &[KinematicState], window: usize) -> f64 {
    let n = history.len();
    if n < 2 {
        return 0.0;
    }
    let w = window.clamp(1, n - 1);
    let (a, b) = (history[n - 1 - w], history[n - 1]);
    let (dx, dy) = (b.x_m - a.x_m, b.y_m - a.y_m);
    if dx.hypot(dy) < 1e-9 {
        return 0.0;
    }
    dy.atan2(dx) - b.vy_mps.atan2(b.vx_mps)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub origin: [f64; 2],
    pub heading: f64,
}

impl Frame {
    pub fn of_history(history: &[KinematicState]) -> Self {
        let last = history.last().expect("nonempty history");
        Self {
            origin: [last.x_m, last.y_m],
            heading: heading_estimate(history, HEADING_WINDOW),
        }
    }

    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p[0] - self.origin[0], p[1] - self.origin[1]);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [
            self.origin[0] + c * p[0] - s * p[1],
            self.origin[1] + s * p[0] + c * p[1],
        ]
    }

    pub fn state_to_local(&self, s: &KinematicState) -> KinematicState {
        let [x, y] = self.to_local([s.x_m, s.y_m]);
        KinematicState::new(x, y, s.vx_mps, s.vy_mps)
    }

    pub fn state_to_world(&self, s: &KinematicState) -> KinematicState {
        let [x, y] = self.to_world([s.x_m, s.y_m]);
        KinematicState::new(x, y, s.vx_mps, s.vy_mps)
    }
}

/// Constant-velocity extrapolation of the last state along `heading`,
/// positions for steps `1..=steps`.
pub fn constant_velocity(last: &KinematicState, heading: f64, dt: f64, steps: usize) -> Vec<[f64; 2]> {
    let course = heading + last.vy_mps.atan2(last.vx_mps);
    let speed = last.vx_mps.hypot(last.vy_mps);
    let (s, c) = course.sin_cos();
    (1..=steps)
        .map(|k| {
            let d = speed * k as f64 * dt;
            [last.x_m + d * c, last.y_m + d * s]
        })
        .collect()
}

/// Vehicles within `radius` of the target (row 0) are fully connected;
/// the rest are isolated. No self loops.
pub fn radius_adjacency(last_positions: &[[f64; 2]], radius: f64) -> Tensor {
    let n = last_positions.len();
    let p0 = last_positions[0];
    let inside: Vec<bool> = last_positions
        .iter()
        .map(|p| (p[0] - p0[0]).hypot(p[1] - p0[1]) <= radius)
        .collect();
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && inside[i] && inside[j] {
                a.set(i, j, 1.0);
            }
        }
    }
    a
}

/// Resamples a polyline to `n` points equally spaced in arc length.
pub fn resample_polyline(points: &[[f64; 2]], n: usize) -> Vec<[f64; 2]> {
    match points {
        [] => return vec![[0.0, 0.0]; n],
        [p] => return vec![*p; n],
        _ => {}
    }
    let mut cum = vec![0.0];
    for w in points.windows(2) {
        let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    if total == 0.0 {
        return vec![points[0]; n];
    }
    let mut seg = 0;
    (0..n)
        .map(|i| {
            let s = total * i as f64 / (n - 1).max(1) as f64;
            while seg + 2 < cum.len() && cum[seg + 1] < s {
                seg += 1;
            }
            let span = cum[seg + 1] - cum[seg];
            let t = if span > 0.0 { (s - cum[seg]) / span } else { 0.0 };
            let (a, b) = (points[seg], points[seg + 1]);
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        })
        .collect()
}

/// A scene in the target frame with everything the model needs.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub scene_id: String,
    pub frame: Frame,
    pub dt_s: f64,
    pub attrs: VehicleAttributes,
    /// `[n][t_p]`, target first.
    pub history: Vec<Vec<KinematicState>>,
    /// Per-vehicle heading estimate in the target frame.
    pub heading0: Vec<f64>,
    /// `[n][t_f]`, empty when the scene has no future.
    pub future: Vec<Vec<KinematicState>>,
    pub future_mask: Vec<Vec<bool>>,
    /// Target constant-velocity anchor, `[t_f]`.
    pub anchor: Vec<[f64; 2]>,
    pub adjacency: Tensor,
    /// Resampled lane polylines in the target frame.
    pub polylines: Option<Vec<Vec<[f64; 2]>>>,
}

impl PreparedScene {
    pub fn new(scene: &Scene, horizon: &HorizonSpec, graph_radius_m: f64, polyline_points: usize) -> Self {
        let frame = Frame::of_history(&scene.target.history);
        let history: Vec<Vec<KinematicState>> = scene
            .tracks()
            .map(|t| t.history.iter().map(|s| frame.state_to_local(s)).collect())
            .collect();
        let heading0 = history
            .iter()
            .map(|h| heading_estimate(h, HEADING_WINDOW))
            .collect();
        let future = if scene.has_future() {
            scene
                .tracks()
                .map(|t| t.future.iter().map(|s| frame.state_to_local(s)).collect())
                .collect()
        } else {
            Vec::new()
        };
        let future_mask = if scene.has_future() {
            scene.tracks().map(|t| t.future_mask.clone()).collect()
        } else {
            Vec::new()
        };
        let last = history[0].last().expect("history");
        let anchor = constant_velocity(last, 0.0, horizon.dt_s, horizon.t_f_steps());
        let last_positions: Vec<[f64; 2]> = history
            .iter()
            .map(|h| h.last().expect("history").position())
            .collect();
        let adjacency = radius_adjacency(&last_positions, graph_radius_m);
        let polylines = scene.map_polylines.as_ref().map(|lines| {
            lines
                .iter()
                .map(|l| {
                    let local: Vec<[f64; 2]> = l.iter().map(|p| frame.to_local(*p)).collect();
                    resample_polyline(&local, polyline_points)
                })
                .collect()
        });
        Self {
            scene_id: scene.scene_id.clone(),
            frame,
            dt_s: scene.dt_s,
            attrs: scene.attrs,
            history,
            heading0,
            future,
            future_mask,
            anchor,
            adjacency,
            polylines,
        }
    }

    pub fn num_vehicles(&self) -> usize {
        self.history.len()
    }

    pub fn has_future(&self) -> bool {
        !self.future.is_empty()
    }

    pub fn last_states(&self) -> Vec<KinematicState> {
        self.history
            .iter()
            .map(|h| *h.last().expect("history"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_roundtrip_and_axes() {
        let f = Frame {
            origin: [3.0, -1.0],
            heading: std::f64::consts::FRAC_PI_2,
        };
        let l = f.to_local([3.0, 1.0]);
        assert!((l[0] - 2.0).abs() < 1e-12 && l[1].abs() < 1e-12);
        let w = f.to_world(f.to_local([7.5, 2.25]));
        assert!((w[0] - 7.5).abs() < 1e-12 && (w[1] - 2.25).abs() < 1e-12);
    }

    #[test]
    fn heading_of_straight_diagonal() {
        let h: Vec<_> = (0..6)
            .map(|k| KinematicState::new(k as f64, k as f64, 2f64.sqrt(), 0.0))
            .collect();
        assert!((heading_estimate(&h, 5) - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        // sideslip is subtracted
        let h: Vec<_> = (0..3)
            .map(|k| KinematicState::new(k as f64, 0.0, 1.0, 1.0))
            .collect();
        assert!((heading_estimate(&h, 1) + std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    }

    #[test]
    fn constant_velocity_steps() {
        let p = constant_velocity(&KinematicState::new(1.0, 2.0, 10.0, 0.0), 0.0, 0.1, 3);
        assert_eq!(p.len(), 3);
        assert!((p[2][0] - 4.0).abs() < 1e-12 && p[2][1] == 2.0);
    }

    #[test]
    fn adjacency_radius() {
        let a = radius_adjacency(&[[0.0, 0.0], [10.0, 0.0], [80.0, 0.0]], 50.0);
        assert_eq!(a.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn polyline_resampling() {
        let r = resample_polyline(&[[0.0, 0.0], [1.0, 0.0], [1.0, 2.0]], 4);
        assert_eq!(r.len(), 4);
        assert_eq!(r[0], [0.0, 0.0]);
        assert!((r[1][0] - 1.0).abs() < 1e-12 && r[1][1].abs() < 1e-12);
        assert!((r[3][1] - 2.0).abs() < 1e-12);
    }
}
