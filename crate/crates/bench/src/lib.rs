//! Shared fixtures for the benchmarks.

use demo_core::data::{Config, Mode, Scene};
use demo_core::features::PreparedScene;
use demo_core::model::DemoModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default highway model and a scene with eight surrounding vehicles.
pub fn highway_fixture() -> (DemoModel, Scene) {
    let config = Config::for_mode(Mode::Highway);
    let model = DemoModel::new(&config).expect("default config builds");
    let scene = demo_core::verify::random_scene(&config, 8, &mut ChaCha8Rng::seed_from_u64(1));
    (model, scene)
}

pub fn prepared(model: &DemoModel, scene: &Scene) -> PreparedScene {
    model.prepare(scene)
}
