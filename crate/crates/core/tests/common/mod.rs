#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sow_core::attention_mod::ModulationConfig;
use sow_core::denoiser::{DenoiserModel, ToyAttentionDenoiser, ToyConfig};
use sow_core::engine::{EngineConfig, Generation, Generator};
use sow_core::harness::condition_patch;
use sow_core::planner::{PlannerConfig, PlannerRequest, PromptTemplates};
use sow_core::schedule::{NoiseSchedule, StepGrid};
use sow_core::{LatentGrid, RegionBox, TokenGrid};

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

pub fn toy() -> ToyAttentionDenoiser {
    ToyAttentionDenoiser::new(ToyConfig::default(), TokenGrid::new(8, 8)).unwrap()
}

/// The stub plan's token box on the default 8x8 latent.
pub fn stub_box_v() -> RegionBox {
    RegionBox::new(2, 1, 4, 4)
}

pub fn condition(seed: u64) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    condition_patch(3, 4, 4, &mut rng)
}

pub fn request(condition: LatentGrid) -> PlannerRequest {
    PlannerRequest::new(condition, "a red kite", 512).unwrap()
}

pub fn generator<'a>(model: &'a dyn DenoiserModel, schedule: &'a NoiseSchedule, engine: EngineConfig) -> Generator<'a> {
    Generator {
        model,
        schedule,
        grid: StepGrid::new(schedule, 10).unwrap(),
        engine,
        modulation: ModulationConfig::default(),
        planner: PlannerConfig::default(),
        templates: PromptTemplates::default(),
        client: None,
        latent_shape: (3, 8, 8),
        resize_condition: false,
    }
}

pub fn run(model: &dyn DenoiserModel, schedule: &NoiseSchedule, engine: EngineConfig, seed: u64) -> Generation {
    generator(model, schedule, engine)
        .generate(&request(condition(seed)), seed, serde_json::Value::Null, None)
        .unwrap()
}

/// Mean squared distance between the output's `box_v` and the condition.
pub fn box_distance(generation: &Generation, condition: &LatentGrid) -> f64 {
    generation.output.crop(&stub_box_v()).unwrap().mse(condition).unwrap()
}
