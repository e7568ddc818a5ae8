//! Personalized federated learning simulator with a feedback controller on
//! the global learning rate and the client aggregation weights.
//!
//! Everything is deterministic given the master seed: data generation,
//! initialization and mini-batch order all draw from [`rng::SeededRng`]
//! streams derived from it.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod datagen;
pub mod error;
pub mod fed;
pub mod math;
pub mod model;
pub mod orchestrator;
pub mod rng;

pub use control::{ControlConfig, ControlState, WeightSource};
pub use datagen::{ClientDataset, DataGenConfig, FederatedDataset};
pub use error::{Error, Result};
pub use fed::{ClientUpdate, LocalTrainConfig, PersonalizationConfig, PersonalizationMode};
pub use model::{Activation, Evaluation, Example, ModelKind, ModelSpec, ParamVector};
pub use orchestrator::{
    run_comparison, run_simulation, run_simulation_with, ArmReport, Comparison, ComparisonReport, RoundMetrics,
    RoundObserver, RunOptions, SimulationConfig, SimulationResult,
};
pub use rng::SeededRng;
