//! Shared fixtures for the criterion benches.

use coldstart_core::synthetic::{quick_setup, SyntheticConfig, SyntheticSetup};
use coldstart_core::{ModelBundle, ModelKind, TrainConfig};

/// A 400-user synthetic corpus with factors from a short Gibbs run.
pub fn setup() -> SyntheticSetup {
    let config = SyntheticConfig {
        users: 400,
        movies: 300,
        ..SyntheticConfig::default()
    };
    quick_setup(&config, 20).expect("synthetic setup")
}

pub fn bundle(setup: &SyntheticSetup, model: ModelKind) -> ModelBundle {
    let config = TrainConfig {
        model,
        ..TrainConfig::default()
    };
    ModelBundle::initialise(&config, &setup.dataset, &setup.factors).expect("bundle")
}
