//! Trajectory overlays as standalone SVG text.

use std::fmt::Write;

use demo_core::data::Scene;
use demo_core::model::ScenePrediction;

const WIDTH: f64 = 800.0;
const MARGIN: f64 = 20.0;

struct View {
    min: [f64; 2],
    scale: f64,
    height: f64,
}

impl View {
    fn fit(points: &[[f64; 2]]) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for i in 0..2 {
                min[i] = min[i].min(p[i]);
                max[i] = max[i].max(p[i]);
            }
        }
        // keep a few metres of lateral room so straight scenes are not flat
        let span = [(max[0] - min[0]).max(1.0), (max[1] - min[1]).max(10.0)];
        let mid_y = 0.5 * (min[1] + max[1]);
        min[1] = mid_y - 0.5 * span[1];
        let scale = (WIDTH - 2.0 * MARGIN) / span[0];
        Self {
            min,
            scale,
            height: span[1] * scale + 2.0 * MARGIN,
        }
    }

    // y grows upwards in the world and downwards in SVG
    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        (
            MARGIN + (p[0] - self.min[0]) * self.scale,
            self.height - MARGIN - (p[1] - self.min[1]) * self.scale,
        )
    }

    fn polyline(&self, out: &mut String, pts: &[[f64; 2]], style: &str) {
        let coords: Vec<String> = pts
            .iter()
            .map(|&p| {
                let (x, y) = self.map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" {style} points="{}"/>"#, coords.join(" "));
    }
}

/// History (grey), ground truth (green) and every candidate (blue, opacity
/// by probability; the most probable one thicker).
pub fn overlay(scene: &Scene, pred: &ScenePrediction) -> String {
    let hist: Vec<[f64; 2]> = scene.target.history.iter().map(|s| s.position()).collect();
    let mut truth: Vec<[f64; 2]> = hist.last().copied().into_iter().collect();
    truth.extend(scene.target.future.iter().map(|s| s.position()));
    let others: Vec<Vec<[f64; 2]>> = scene
        .surroundings
        .iter()
        .map(|t| t.history.iter().map(|s| s.position()).collect())
        .collect();

    let mut all: Vec<[f64; 2]> = hist.iter().chain(&truth).copied().collect();
    all.extend(pred.prediction.trajectories.iter().flatten());
    let view = View::fit(&all);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{:.0}" viewBox="0 0 {WIDTH} {:.2}">"#,
        view.height, view.height
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, "<title>{}</title>", pred.scene_id);
    for o in &others {
        view.polyline(&mut s, o, r##"stroke="#bbbbbb" stroke-width="1.5""##);
    }
    view.polyline(&mut s, &hist, r##"stroke="#555555" stroke-width="2.5""##);
    let best = pred.prediction.most_probable();
    for (i, (traj, p)) in pred
        .prediction
        .trajectories
        .iter()
        .zip(&pred.prediction.maneuver_probs)
        .enumerate()
    {
        let width = if i == best { 2.5 } else { 1.2 };
        let style = format!(
            r##"stroke="#1f5fbf" stroke-width="{width}" stroke-opacity="{:.3}""##,
            0.15 + 0.85 * p
        );
        let mut pts = vec![*hist.last().unwrap_or(&traj[0])];
        pts.extend(traj);
        view.polyline(&mut s, &pts, &style);
    }
    view.polyline(&mut s, &truth, r##"stroke="#2a9d3a" stroke-width="2" stroke-dasharray="6 3""##);
    s.push_str("</svg>\n");
    s
}
