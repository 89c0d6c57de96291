//! The full predictor: dynamics stage, interaction stage and decoder over
//! one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Config, Scene};
use crate::decoder::{
    accuracy_loss, cross_entropy, label_maneuver, Decoder, DecoderPass, LossTerms, Maneuver, PredictionSet,
};
use crate::dyn_stage::{dynamics_informed_loss_tape, kl_loss, DynPass, DynStage, GenerationMode, LatentSource};
use crate::dynamics::KinematicState;
use crate::error::ModelError;
use crate::features::PreparedScene;
use crate::interaction::{InteractionPass, InteractionStage};
use crate::numkernel::{ParamStore, Tape};

type Result<T> = std::result::Result<T, ModelError>;

/// Everything one scene produces in prior mode.
pub struct ForwardPass {
    pub dynamics: DynPass,
    pub interaction: InteractionPass,
    pub decoder: DecoderPass,
}

/// A prediction in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub scene_id: String,
    pub prediction: PredictionSet,
    /// Target positions over the short-term horizon from the dynamics stage.
    pub short_term: Vec<[f64; 2]>,
}

#[derive(Clone, Debug)]
pub struct DemoModel {
    pub config: Config,
    pub store: ParamStore,
    pub dyn_stage: DynStage,
    pub interaction: InteractionStage,
    pub decoder: Decoder,
}

impl DemoModel {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: &Config) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let dyn_stage = DynStage::new(&mut store, &mut rng, &config.model, &config.horizon, config.dynamics)?;
        let interaction = InteractionStage::new(&mut store, &mut rng, &config.model)?;
        let decoder = Decoder::new(&mut store, &mut rng, config.model.d_model, config.horizon.t_f_steps())?;
        Ok(Self {
            config: config.clone(),
            store,
            dyn_stage,
            interaction,
            decoder,
        })
    }

    /// Replaces the parameters with a loaded store of the same layout.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        self.store.load_values(other)?;
        Ok(())
    }

    pub fn prepare(&self, scene: &Scene) -> PreparedScene {
        PreparedScene::new(
            scene,
            &self.config.horizon,
            self.config.model.graph_radius_m,
            self.config.model.polyline_points,
        )
    }

    fn check(&self, scene: &PreparedScene) -> Result<()> {
        let t_p = self.config.horizon.t_p_steps();
        if let Some(h) = scene.history.iter().find(|h| h.len() != t_p) {
            return Err(ModelError::WrongHistoryLength {
                expected: t_p,
                got: h.len(),
            });
        }
        Ok(())
    }

    /// Prior-mode forward pass with the given latent source.
    pub fn forward(&self, tape: &mut Tape, scene: &PreparedScene, latents: LatentSource<'_>) -> Result<ForwardPass> {
        self.check(scene)?;
        let dynamics = self.dyn_stage.iterative_generate(
            tape,
            &self.store,
            &scene.history,
            &scene.heading0,
            &scene.attrs,
            GenerationMode::Prior,
            latents,
        )?;
        let interaction = self.interaction.forward(
            tape,
            &self.store,
            &scene.history,
            &dynamics.states,
            dynamics.dyn_features,
            scene.polylines.as_deref(),
            &scene.adjacency,
        )?;
        let decoder = self.decoder.forward(
            tape,
            &self.store,
            interaction.interaction,
            dynamics.dyn_features,
            &scene.anchor,
        )?;
        Ok(ForwardPass {
            dynamics,
            interaction,
            decoder,
        })
    }

    pub fn maneuver_label(&self, scene: &PreparedScene) -> Result<Maneuver> {
        let future = scene
            .future
            .first()
            .ok_or_else(|| ModelError::MissingFuture(scene.scene_id.clone()))?;
        Ok(label_maneuver(&scene.history[0], future, self.config.horizon.t_f_s))
    }

    /// Builds all four loss terms for one scene. The posterior pass (teacher
    /// forced, sampled `z`) feeds `L_KL` and `L_DI`; the decoder losses use
    /// the prior-mean pass, the same path inference takes.
    pub fn scene_losses(&self, tape: &mut Tape, scene: &PreparedScene, rng: &mut ChaCha8Rng) -> Result<LossTerms> {
        if !scene.has_future() {
            return Err(ModelError::MissingFuture(scene.scene_id.clone()));
        }
        self.check(scene)?;
        let t_s = self.config.horizon.t_s_steps();
        let teacher: Vec<Vec<KinematicState>> = scene.future.iter().map(|f| f[..t_s].to_vec()).collect();
        let vehicle_mask: Vec<bool> = scene
            .future_mask
            .iter()
            .map(|m| m[..t_s].iter().all(|&b| b))
            .collect();
        let post = self.dyn_stage.iterative_generate(
            tape,
            &self.store,
            &scene.history,
            &scene.heading0,
            &scene.attrs,
            GenerationMode::Posterior { teacher: &teacher },
            LatentSource::Sample(rng),
        )?;
        let kl = kl_loss(tape, &post.posteriors, &post.priors, &vehicle_mask)?;
        let di = dynamics_informed_loss_tape(tape, &teacher, &post.states, &vehicle_mask)?;

        let pass = self.forward(tape, scene, LatentSource::Mean)?;
        let maneuver = self.maneuver_label(scene)?;
        let ce = cross_entropy(tape, pass.decoder.log_probs, maneuver)?;
        let gt: Vec<[f64; 2]> = scene.future[0].iter().map(|s| s.position()).collect();
        let ac = accuracy_loss(
            tape,
            &pass.decoder,
            &gt,
            &scene.future_mask[0],
            maneuver,
            self.config.mode,
        )?;
        Ok(LossTerms { kl, di, ce, ac })
    }

    /// Deterministic prediction (prior-mean latents) in the scene's frame.
    pub fn predict_local(&self, scene: &PreparedScene) -> Result<(PredictionSet, Vec<[f64; 2]>)> {
        let mut tape = Tape::inference();
        let pass = self.forward(&mut tape, scene, LatentSource::Mean)?;
        tape.check_finite()?;
        let short = pass
            .dynamics
            .states
            .iter()
            .map(|&s| {
                let v = tape.value(s);
                [v.get(0, 0), v.get(0, 1)]
            })
            .collect();
        Ok((pass.decoder.prediction(&tape), short))
    }

    /// Deterministic prediction in world coordinates.
    pub fn predict(&self, scene: &Scene) -> Result<ScenePrediction> {
        let prep = self.prepare(scene);
        let (local, short) = self.predict_local(&prep)?;
        let to_world = |p: &[f64; 2]| prep.frame.to_world(*p);
        Ok(ScenePrediction {
            scene_id: scene.scene_id.clone(),
            prediction: PredictionSet {
                trajectories: local
                    .trajectories
                    .iter()
                    .map(|t| t.iter().map(to_world).collect())
                    .collect(),
                maneuver_probs: local.maneuver_probs,
            },
            short_term: short.iter().map(to_world).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::config::ModelConfig;
    use crate::data::{synth_scenario, ScenarioKind};

    fn small_config() -> Config {
        Config {
            model: ModelConfig {
                d_model: 16,
                z_dim: 4,
                ..ModelConfig::default()
            },
            ..Config::default()
        }
    }

    fn scene(kind: ScenarioKind, seed: u64) -> Scene {
        let c = Config::default();
        synth_scenario(kind, 0.05, seed, &c.attrs, &c.horizon).scene
    }

    #[test]
    fn predict_is_deterministic_and_well_formed() {
        let m = DemoModel::new(&small_config()).unwrap();
        let s = scene(ScenarioKind::LaneChangeLeft, 3);
        let a = m.predict(&s).unwrap();
        let b = m.predict(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.prediction.trajectories.len(), 6);
        assert_eq!(a.prediction.trajectories[0].len(), 25);
        assert_eq!(a.short_term.len(), 10);
        assert!((a.prediction.maneuver_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn wrong_history_length_is_reported() {
        let m = DemoModel::new(&small_config()).unwrap();
        let mut s = scene(ScenarioKind::Straight, 1);
        s.target.history.truncate(4);
        assert!(matches!(
            m.predict(&s),
            Err(ModelError::WrongHistoryLength { expected: 15, got: 4 })
        ));
    }

    #[test]
    fn losses_are_finite_and_reach_every_parameter() {
        let m = DemoModel::new(&small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut grads = vec![0.0; m.store.len()];
        let mut cases: Vec<Scene> = ScenarioKind::ALL
            .iter()
            .enumerate()
            .map(|(i, k)| scene(*k, i as u64))
            .collect();
        // braking variants of the lane changes reach the remaining heads
        for k in [ScenarioKind::LaneChangeLeft, ScenarioKind::LaneChangeRight] {
            let mut sc = scene(k, 9);
            sc.target.future.last_mut().unwrap().vx_mps -= 6.0;
            cases.push(sc);
        }
        for mut sc in cases {
            // lane lines so the map encoder is exercised too
            sc.map_polylines = Some(
                (-1..=1)
                    .map(|l| (0..4).map(|k| [k as f64 * 40.0 - 60.0, l as f64 * 3.6]).collect())
                    .collect(),
            );
            let prep = m.prepare(&sc);
            let mut tape = Tape::new();
            let terms = m.scene_losses(&mut tape, &prep, &mut rng).unwrap();
            assert!(terms.values(&tape).iter().all(|v| v.is_finite()));
            assert!(tape.scalar(terms.kl) >= 0.0 && tape.scalar(terms.di) >= 0.0);
            let total = terms.total(&mut tape, &m.config.train.weights).unwrap();
            let g = tape.backward(total).unwrap();
            let pg = tape.param_grads(&g, m.store.len());
            for (acc, g) in grads.iter_mut().zip(&pg.grads) {
                *acc += g.as_ref().map_or(0.0, |v| v.iter().map(|x| x.abs()).sum::<f64>());
            }
        }
        for (id, name, _) in m.store.iter() {
            assert!(grads[id.index()] > 0.0, "no gradient reaches {name}");
        }
    }

    #[test]
    fn missing_future_is_an_error() {
        let m = DemoModel::new(&small_config()).unwrap();
        let mut s = scene(ScenarioKind::Brake, 2);
        s.target.future.clear();
        s.target.future_mask.clear();
        for t in &mut s.surroundings {
            t.future.clear();
            t.future_mask.clear();
        }
        let prep = m.prepare(&s);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            m.scene_losses(&mut tape, &prep, &mut rng),
            Err(ModelError::MissingFuture(_))
        ));
    }
}
