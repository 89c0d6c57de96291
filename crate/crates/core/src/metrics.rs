//! Benchmark metrics and the constant-velocity baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::HorizonSpec;
use crate::decoder::PredictionSet;
use crate::dynamics::KinematicState;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("second {second} is beyond the {steps}-step horizon")]
    HorizonExceeded { second: u32, steps: usize },
    #[error("K = {k} exceeds the {available} candidates")]
    KTooLarge { k: usize, available: usize },
    #[error("scene ids do not match: {0}")]
    IdMismatch(String),
    #[error("no scenes to evaluate")]
    Empty,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
}

type Result<T> = std::result::Result<T, MetricsError>;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn step_index(second: u32, dt_s: f64, len: usize) -> Result<usize> {
    let k = second as f64 / dt_s;
    let r = k.round();
    if second == 0 || (k - r).abs() > 1e-9 || r as usize > len {
        return Err(MetricsError::HorizonExceeded { second, steps: len });
    }
    Ok(r as usize - 1)
}

/// `sqrt(mean_i ‖pred_i(t) − gt_i(t)‖²)` at `t = second`.
pub fn rmse_at(preds: &[Vec<[f64; 2]>], gts: &[Vec<[f64; 2]>], second: u32, dt_s: f64) -> Result<f64> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    if preds.len() != gts.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let k = step_index(second, dt_s, p.len().min(g.len()))?;
        sum += dist(p[k], g[k]).powi(2);
    }
    Ok((sum / preds.len() as f64).sqrt())
}

fn top_k(set: &PredictionSet, k: usize) -> Result<Vec<usize>> {
    let available = set.trajectories.len();
    if k == 0 || k > available {
        return Err(MetricsError::KTooLarge { k, available });
    }
    if set.maneuver_probs.len() != available {
        return Err(MetricsError::LengthMismatch("probabilities vs trajectories".into()));
    }
    Ok(set.ranked().into_iter().take(k).collect())
}

fn check_len(traj: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<()> {
    if traj.len() != gt.len() || gt.is_empty() {
        return Err(MetricsError::LengthMismatch(format!(
            "trajectory of {} steps against {}",
            traj.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Minimum over the `k` most probable candidates of the mean displacement.
pub fn min_ade(set: &PredictionSet, gt: &[[f64; 2]], k: usize) -> Result<f64> {
    let mut best = f64::INFINITY;
    for i in top_k(set, k)? {
        let t = &set.trajectories[i];
        check_len(t, gt)?;
        let ade = t.iter().zip(gt).map(|(a, b)| dist(*a, *b)).sum::<f64>() / gt.len() as f64;
        best = best.min(ade);
    }
    Ok(best)
}

/// Minimum over the `k` most probable candidates of the final displacement.
pub fn min_fde(set: &PredictionSet, gt: &[[f64; 2]], k: usize) -> Result<f64> {
    let mut best = f64::INFINITY;
    for i in top_k(set, k)? {
        let t = &set.trajectories[i];
        check_len(t, gt)?;
        best = best.min(dist(t[t.len() - 1], gt[gt.len() - 1]));
    }
    Ok(best)
}

/// Extrapolates the last position with the velocity of the last step,
/// `(p_n − p_{n−1})/Δt`, for `steps` steps.
pub fn const_velocity_baseline(history: &[KinematicState], dt_s: f64, steps: usize) -> Vec<[f64; 2]> {
    smoothed_velocity_baseline(history, 1, dt_s, steps)
}

/// Like [`const_velocity_baseline`] with the velocity averaged over the
/// last `window` steps.
pub fn smoothed_velocity_baseline(history: &[KinematicState], window: usize, dt_s: f64, steps: usize) -> Vec<[f64; 2]> {
    let Some(last) = history.last() else {
        return vec![[0.0, 0.0]; steps];
    };
    let w = window.clamp(1, history.len().saturating_sub(1).max(1));
    let (vx, vy) = match history.len() {
        0 | 1 => (0.0, 0.0),
        n => {
            let a = history[n - 1 - w.min(n - 1)];
            let span = w.min(n - 1) as f64 * dt_s;
            ((last.x_m - a.x_m) / span, (last.y_m - a.y_m) / span)
        }
    };
    (1..=steps)
        .map(|k| {
            let t = k as f64 * dt_s;
            [last.x_m + vx * t, last.y_m + vy * t]
        })
        .collect()
}

/// Per-second RMSE and top-K displacement errors over a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse_per_second: BTreeMap<u32, f64>,
    pub min_ade_k: BTreeMap<usize, f64>,
    pub min_fde_k: BTreeMap<usize, f64>,
    pub count: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table: one row per horizon, then one per K.
    pub fn to_table(&self, title: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{title} ({} scenes)", self.count);
        let _ = writeln!(out, "{:<12}{:>12}", "horizon", "RMSE (m)");
        for (s, v) in &self.rmse_per_second {
            let _ = writeln!(out, "{:<12}{:>12.4}", format!("{s} s"), v);
        }
        if !self.min_ade_k.is_empty() {
            let _ = writeln!(out, "{:<12}{:>12}{:>12}", "K", "minADE", "minFDE");
            for (k, ade) in &self.min_ade_k {
                let fde = self.min_fde_k.get(k).copied().unwrap_or(f64::NAN);
                let _ = writeln!(out, "{:<12}{:>12.4}{:>12.4}", k, ade, fde);
            }
        }
        out
    }
}

/// Scores prediction sets against ground-truth futures. RMSE uses each
/// scene's most probable candidate; values of `ks` above the candidate
/// count are an error.
pub fn evaluate(preds: &[PredictionSet], gts: &[Vec<[f64; 2]>], horizon: &HorizonSpec, ks: &[usize]) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    if preds.len() != gts.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let best: Vec<Vec<[f64; 2]>> = preds
        .iter()
        .map(|p| p.trajectories[p.most_probable()].clone())
        .collect();
    let mut rmse_per_second = BTreeMap::new();
    let whole_seconds = (horizon.t_f_s + 1e-9).floor() as u32;
    for s in 1..=whole_seconds {
        if horizon.step_of_second(s).is_some() {
            rmse_per_second.insert(s, rmse_at(&best, gts, s, horizon.dt_s)?);
        }
    }
    let mut min_ade_k = BTreeMap::new();
    let mut min_fde_k = BTreeMap::new();
    for &k in ks {
        // per-scene values in parallel, summed in scene order
        let per: Vec<(f64, f64)> = preds
            .par_iter()
            .zip(gts.par_iter())
            .map(|(p, g)| Ok((min_ade(p, g, k)?, min_fde(p, g, k)?)))
            .collect::<Result<_>>()?;
        let n = per.len() as f64;
        min_ade_k.insert(k, per.iter().map(|v| v.0).sum::<f64>() / n);
        min_fde_k.insert(k, per.iter().map(|v| v.1).sum::<f64>() / n);
    }
    Ok(MetricReport {
        rmse_per_second,
        min_ade_k,
        min_fde_k,
        count: preds.len(),
    })
}

/// [`evaluate`] over id-keyed predictions; every ground-truth id must have
/// exactly one prediction and vice versa.
pub fn evaluate_by_id(
    preds: &[(String, PredictionSet)],
    gts: &[(String, Vec<[f64; 2]>)],
    horizon: &HorizonSpec,
    ks: &[usize],
) -> Result<MetricReport> {
    let by_id: BTreeMap<&str, &PredictionSet> = preds.iter().map(|(i, p)| (i.as_str(), p)).collect();
    if by_id.len() != preds.len() {
        return Err(MetricsError::IdMismatch("duplicate prediction id".into()));
    }
    if preds.len() != gts.len() {
        return Err(MetricsError::IdMismatch(format!(
            "{} predictions for {} scenes",
            preds.len(),
            gts.len()
        )));
    }
    let mut ordered = Vec::with_capacity(gts.len());
    for (id, _) in gts {
        let p = by_id
            .get(id.as_str())
            .ok_or_else(|| MetricsError::IdMismatch(format!("no prediction for scene {id}")))?;
        ordered.push((*p).clone());
    }
    let g: Vec<Vec<[f64; 2]>> = gts.iter().map(|(_, g)| g.clone()).collect();
    evaluate(&ordered, &g, horizon, ks)
}
