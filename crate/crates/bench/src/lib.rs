//! Fixtures shared by the criterion benches.

use fedctl_core::datagen::{self, FederatedDataset};
use fedctl_core::model::{self, Activation, Example, ModelSpec, ParamVector};
use fedctl_core::{SeededRng, SimulationConfig};

/// One-round default config, optionally with an MLP in place of logreg.
pub fn one_round_config(mlp: bool) -> SimulationConfig {
    let mut cfg = SimulationConfig {
        rounds: 1,
        ..SimulationConfig::default()
    };
    if mlp {
        cfg.model = ModelSpec::mlp1(cfg.data.input_dim, 16, cfg.data.num_classes, Activation::Tanh);
    }
    cfg.resolved()
}

pub fn dataset(cfg: &SimulationConfig) -> FederatedDataset {
    datagen::generate(&cfg.data).expect("default data config is valid")
}

pub fn initial_params(spec: &ModelSpec) -> ParamVector {
    model::init_params(spec, &mut SeededRng::new(0)).expect("valid spec")
}

pub fn random_batch(spec: &ModelSpec, size: usize, seed: u64) -> Vec<Example> {
    let mut rng = SeededRng::new(seed);
    (0..size)
        .map(|_| {
            let x = (0..spec.input_dim).map(|_| rng.standard_normal()).collect();
            Example::new(x, rng.below(spec.num_classes))
        })
        .collect()
}
