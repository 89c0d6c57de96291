//! Mini-batch training, evaluation and the synthetic benchmark.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split, synth_mixed, Config, DataError, Scene};
use crate::decoder::PredictionSet;
use crate::error::ModelError;
use crate::features::{PreparedScene, HEADING_WINDOW};
use crate::metrics::{const_velocity_baseline, evaluate, smoothed_velocity_baseline, MetricReport, MetricsError};
use crate::model::{DemoModel, ScenePrediction};
use crate::numkernel::{AdamW, CosineSchedule, ParamGrads, Tape};

/// Global gradient-norm ceiling applied to each averaged batch gradient.
pub const GRAD_CLIP_NORM: f64 = 5.0;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no training scenes")]
    NoScenes,
    #[error("{0}")]
    Callback(String),
}

impl TrainError {
    pub fn is_numeric(&self) -> bool {
        matches!(self, TrainError::Model(e) if e.is_numeric())
    }
}

type Result<T> = std::result::Result<T, TrainError>;

/// Mean losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub kl: f64,
    pub di: f64,
    pub ce: f64,
    pub ac: f64,
    pub val_total: Option<f64>,
    pub grad_norm: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,total,kl,di,ce,ac,val_total,grad_norm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.total,
            self.kl,
            self.di,
            self.ce,
            self.ac,
            self.val_total.map_or(String::new(), |v| v.to_string()),
            self.grad_norm
        )
    }
}

fn scene_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let s = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(index as u64);
    ChaCha8Rng::seed_from_u64(s)
}

struct SceneOutcome {
    grads: ParamGrads,
    terms: [f64; 4],
    total: f64,
}

fn scene_step(model: &DemoModel, scene: &PreparedScene, rng: &mut ChaCha8Rng, with_grads: bool) -> Result<SceneOutcome> {
    let mut tape = Tape::new();
    let terms = model.scene_losses(&mut tape, scene, rng)?;
    let total = terms.total(&mut tape, &model.config.train.weights)?;
    let value = tape.scalar(total);
    if !value.is_finite() {
        return Err(ModelError::Kernel(crate::numkernel::KernelError::NonFinite {
            op: "loss",
            node: total.index(),
        })
        .into());
    }
    let grads = if with_grads {
        let g = tape.backward(total).map_err(ModelError::from)?;
        tape.param_grads(&g, model.store.len())
    } else {
        ParamGrads::default()
    };
    Ok(SceneOutcome {
        grads,
        terms: terms.values(&tape),
        total: value,
    })
}

fn grad_norm(g: &ParamGrads) -> f64 {
    g.grads
        .iter()
        .flatten()
        .flat_map(|v| v.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Mean total loss over `scenes` with fixed per-scene sampling seeds.
pub fn validation_loss(model: &DemoModel, scenes: &[PreparedScene]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(TrainError::NoScenes);
    }
    let seed = model.config.seed;
    let totals: Vec<f64> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = scene_rng(seed ^ 0x5EED, usize::MAX, i);
            scene_step(model, s, &mut rng, false).map(|o| o.total)
        })
        .collect::<Result<_>>()?;
    Ok(totals.iter().sum::<f64>() / totals.len() as f64)
}

/// Trains for `epochs` epochs. `on_epoch` sees every log line and the
/// model after that epoch.
pub fn train(
    model: &mut DemoModel,
    train_set: &[PreparedScene],
    val_set: &[PreparedScene],
    epochs: usize,
    mut on_epoch: impl FnMut(&EpochLog, &DemoModel) -> std::result::Result<(), String>,
) -> Result<Vec<EpochLog>> {
    if train_set.is_empty() {
        return Err(TrainError::NoScenes);
    }
    let tc = model.config.train;
    let batch = tc.batch_size.max(1);
    let batches = train_set.len().div_ceil(batch);
    let schedule = CosineSchedule {
        lr_init: tc.lr_init,
        lr_min: tc.lr_min,
        t_max: (epochs * batches) as u64,
    };
    let opt = AdamW {
        weight_decay: tc.weight_decay,
        ..AdamW::default()
    };
    let seed = model.config.seed;
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut scene_rng(seed, epoch, usize::MAX));
        let mut sums = [0.0; 5];
        let mut norm_sum = 0.0;
        let mut lr = tc.lr_init;
        for chunk in order.chunks(batch) {
            let model_ref = &*model;
            let outcomes: Vec<SceneOutcome> = chunk
                .par_iter()
                .map(|&i| {
                    let mut rng = scene_rng(seed, epoch, i);
                    scene_step(model_ref, &train_set[i], &mut rng, true)
                })
                .collect::<Result<_>>()?;
            let mut grads = ParamGrads::default();
            for o in &outcomes {
                grads.add_assign(&o.grads);
                sums[0] += o.total;
                for (s, t) in sums[1..].iter_mut().zip(o.terms) {
                    *s += t;
                }
            }
            grads.scale(1.0 / outcomes.len() as f64);
            let norm = grad_norm(&grads);
            norm_sum += norm;
            if norm > GRAD_CLIP_NORM {
                grads.scale(GRAD_CLIP_NORM / norm);
            }
            model.store.zero_grad();
            model.store.accumulate(&grads).map_err(ModelError::from)?;
            lr = opt.step(&mut model.store, &schedule).map_err(ModelError::from)?;
        }
        let n = train_set.len() as f64;
        let val_total = if val_set.is_empty() {
            None
        } else {
            Some(validation_loss(model, val_set)?)
        };
        let log = EpochLog {
            epoch: epoch + 1,
            lr,
            total: sums[0] / n,
            kl: sums[1] / n,
            di: sums[2] / n,
            ce: sums[3] / n,
            ac: sums[4] / n,
            val_total,
            grad_norm: norm_sum / batches as f64,
        };
        log::info!(
            "epoch {} total {:.4} (kl {:.4} di {:.4} ce {:.4} ac {:.4})",
            log.epoch,
            log.total,
            log.kl,
            log.di,
            log.ce,
            log.ac
        );
        on_epoch(&log, model).map_err(TrainError::Callback)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Target futures in world coordinates.
pub fn ground_truth(scenes: &[Scene]) -> Vec<Vec<[f64; 2]>> {
    scenes
        .iter()
        .map(|s| s.target.future.iter().map(|p| p.position()).collect())
        .collect()
}

/// Deterministic predictions for every scene, in order.
pub fn predict_all(model: &DemoModel, scenes: &[Scene]) -> Result<Vec<ScenePrediction>> {
    Ok(scenes
        .par_iter()
        .map(|s| model.predict(s))
        .collect::<std::result::Result<_, _>>()?)
}

pub fn evaluate_model(model: &DemoModel, scenes: &[Scene]) -> Result<(MetricReport, Vec<ScenePrediction>)> {
    let preds = predict_all(model, scenes)?;
    let sets: Vec<PredictionSet> = preds.iter().map(|p| p.prediction.clone()).collect();
    let report = evaluate(&sets, &ground_truth(scenes), &model.config.horizon, &model.config.eval_k)?;
    Ok((report, preds))
}

/// Report of a single-candidate extrapolation over the target histories.
/// `window = 1` is the constant-velocity baseline.
pub fn baseline_report(config: &Config, scenes: &[Scene], window: usize) -> Result<MetricReport> {
    let steps = config.horizon.t_f_steps();
    let sets: Vec<PredictionSet> = scenes
        .iter()
        .map(|s| PredictionSet {
            trajectories: vec![if window == 1 {
                const_velocity_baseline(&s.target.history, config.horizon.dt_s, steps)
            } else {
                smoothed_velocity_baseline(&s.target.history, window, config.horizon.dt_s, steps)
            }],
            maneuver_probs: vec![1.0],
        })
        .collect();
    Ok(evaluate(&sets, &ground_truth(scenes), &config.horizon, &[1])?)
}

/// Everything the synthetic benchmark produces.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchmarkOutcome {
    pub logs: Vec<EpochLog>,
    pub model: MetricReport,
    pub const_velocity: MetricReport,
    /// Constant velocity with the heading window the model frame uses.
    pub smoothed_velocity: MetricReport,
    pub split_sizes: [usize; 3],
}

impl BenchmarkOutcome {
    /// Relative improvement over the constant-velocity baseline at `second`.
    pub fn improvement_at(&self, second: u32) -> Option<f64> {
        let m = self.model.rmse_per_second.get(&second)?;
        let b = self.const_velocity.rmse_per_second.get(&second)?;
        Some(1.0 - m / b)
    }
}

/// Generates `config.synth.count` mixed scenes, splits them, trains for
/// `config.train.epochs` epochs and scores the test split.
pub fn synthetic_benchmark(config: &Config) -> Result<(DemoModel, BenchmarkOutcome)> {
    let scenes: Vec<Scene> = synth_mixed(
        config.synth.count,
        config.synth.noise_std,
        config.seed,
        &config.attrs,
        &config.horizon,
    )
    .into_iter()
    .map(|s| s.scene)
    .collect();
    let (tr, va, te) = split(&scenes, config.train.split, config.seed)?;
    let mut model = DemoModel::new(config)?;
    let prep = |v: &[Scene]| -> Vec<PreparedScene> { v.iter().map(|s| model.prepare(s)).collect() };
    let (tr_p, va_p) = (prep(&tr), prep(&va));
    let logs = train(&mut model, &tr_p, &va_p, config.train.epochs, |_, _| Ok(()))?;
    let (report, _) = evaluate_model(&model, &te)?;
    let outcome = BenchmarkOutcome {
        logs,
        model: report,
        const_velocity: baseline_report(config, &te, 1)?,
        smoothed_velocity: baseline_report(config, &te, HEADING_WINDOW)?,
        split_sizes: [tr.len(), va.len(), te.len()],
    };
    Ok((model, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::config::ModelConfig;

    fn tiny() -> Config {
        let mut c = Config {
            model: ModelConfig {
                d_model: 8,
                z_dim: 2,
                scan_state: 2,
                ..ModelConfig::default()
            },
            ..Config::default()
        };
        c.synth.count = 12;
        c.train.epochs = 2;
        c
    }

    #[test]
    fn training_is_deterministic_and_logs_each_epoch() {
        let c = tiny();
        let (m1, a) = synthetic_benchmark(&c).unwrap();
        let (m2, b) = synthetic_benchmark(&c).unwrap();
        assert_eq!(a.logs.len(), 2);
        assert_eq!(a.model.to_json(), b.model.to_json());
        assert_eq!(
            crate::numkernel::checkpoint::to_bytes(&m1.store),
            crate::numkernel::checkpoint::to_bytes(&m2.store)
        );
        assert!(a.logs.iter().all(|l| l.total.is_finite()));
        assert_eq!(a.split_sizes.iter().sum::<usize>(), 12);
    }

    #[test]
    fn loss_decreases_on_a_small_set() {
        let mut c = tiny();
        c.train.epochs = 15;
        c.synth.count = 8;
        c.train.split = [1.0, 0.0, 0.0];
        let scenes: Vec<Scene> = synth_mixed(8, 0.1, 1, &c.attrs, &c.horizon)
            .into_iter()
            .map(|s| s.scene)
            .collect();
        let mut m = DemoModel::new(&c).unwrap();
        let prep: Vec<PreparedScene> = scenes.iter().map(|s| m.prepare(s)).collect();
        let logs = train(&mut m, &prep, &[], 15, |_, _| Ok(())).unwrap();
        assert!(logs.last().unwrap().total < logs[0].total);
    }

    #[test]
    fn csv_rows_have_all_columns() {
        let log = EpochLog {
            epoch: 1,
            lr: 1e-3,
            total: 1.0,
            kl: 0.1,
            di: 0.2,
            ce: 0.3,
            ac: 0.4,
            val_total: None,
            grad_norm: 2.0,
        };
        assert_eq!(
            log.csv_row().split(',').count(),
            EpochLog::CSV_HEADER.split(',').count()
        );
    }
}
