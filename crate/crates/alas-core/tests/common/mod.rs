#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use alas_core::clock::{FixedClock, RecordingSleeper, SharedClock, SharedSleeper};
use alas_core::config::Config;
use alas_core::orchestrator::{Engine, RunOptions};
use alas_core::provider::sim::{SimOptions, SimProvider, SimWorld};
use alas_core::provider::CountingProvider;
use alas_core::storage::Store;
use serde::Deserialize;

pub const CLOCK_ISO: &str = "2024-05-01T00:00:00Z";

/// Small-session config: four topics per wave, two probes per category.
pub fn small_config(root: &Path) -> Config {
    let mut config = Config::default();
    config.storage.root = root.display().to_string();
    config.budget.max_questions_per_topic = 4;
    config.budget.max_topics = 4;
    config.curriculum.min_topics = 4;
    config.curriculum.advanced_topic_cap = 0;
    config.evaluation.probe_per_category = 2;
    config
}

/// Engine wired to a persistent simulated provider under the store root,
/// with a fixed clock and recorded (not slept) waits.
pub fn engine_at(
    world: SimWorld,
    config: Config,
    options: RunOptions,
) -> (Engine, Arc<CountingProvider>) {
    let root = std::path::PathBuf::from(&config.storage.root);
    let sim = SimProvider::persistent(
        world,
        SimOptions::default(),
        root.join("sim").join("provider_state.json"),
    )
    .unwrap();
    let counting = Arc::new(CountingProvider::new(Arc::new(sim)));
    let store = Store::open(&root).unwrap();
    let clock: SharedClock = Arc::new(FixedClock(CLOCK_ISO.into()));
    let sleeper: SharedSleeper = Arc::new(RecordingSleeper::default());
    (Engine::new(store, config, counting.clone(), clock, sleeper, options), counting)
}

#[derive(Deserialize)]
struct ProviderSnapshot {
    world: SimWorld,
}

/// The simulated world as the provider left it on disk, fine-tunes included.
pub fn final_world(root: &Path) -> SimWorld {
    let path = root.join("sim").join("provider_state.json");
    let bytes = std::fs::read(&path).unwrap();
    serde_json::from_slice::<ProviderSnapshot>(&bytes).unwrap().world
}
