//! Feedback control of the global learning rate and the aggregation weights.
//!
//! The learning rate follows `eta <- clamp(eta * exp(-gamma * dL), eta_min, eta_max)`
//! where `dL = previous validation loss - current validation loss`, so rounds
//! that improve the global model anneal the rate. Aggregation weights are
//! `w_i = f_i / Σ f_j` for a per-client contribution score `f_i`.

use serde::{Deserialize, Serialize};

use crate::datagen::ClientDataset;
use crate::error::{Error, Result};
use crate::fed::ClientUpdate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSource {
    DataSizeStatic,
    LossReduction,
    GradNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub enabled: bool,
    pub gamma: f64,
    pub eta0: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub weight_source: WeightSource,
    /// Floor applied to each contribution score.
    pub weight_floor: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            gamma: 5.0,
            eta0: 0.05,
            eta_min: 1e-4,
            eta_max: 1.0,
            weight_source: WeightSource::LossReduction,
            weight_floor: 0.0,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::config("control.gamma", "must be finite and >= 0"));
        }
        if !(self.eta_min > 0.0) || !self.eta_min.is_finite() {
            return Err(Error::config("control.eta_min", "must be finite and > 0"));
        }
        if !(self.eta_max >= self.eta_min) || !self.eta_max.is_finite() {
            return Err(Error::config(
                "control.eta_max",
                "must be finite and >= control.eta_min",
            ));
        }
        if !(self.eta0 >= self.eta_min && self.eta0 <= self.eta_max) {
            return Err(Error::config(
                "control.eta0",
                "must lie in [control.eta_min, control.eta_max]",
            ));
        }
        if !(self.weight_floor >= 0.0) || !self.weight_floor.is_finite() {
            return Err(Error::config("control.weight_floor", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    pub eta: f64,
    pub prev_global_loss: Option<f64>,
    pub weights: Vec<f64>,
    pub round: usize,
}

impl ControlState {
    pub fn new(cfg: &ControlConfig, weights: Vec<f64>) -> Self {
        Self {
            eta: cfg.eta0,
            prev_global_loss: None,
            weights,
            round: 0,
        }
    }
}

/// Normalize nonnegative scores to sum to one. `None` if they sum to zero.
fn normalize(scores: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = scores.iter().sum();
    if total > 0.0 && total.is_finite() {
        Some(scores.iter().map(|s| s / total).collect())
    } else {
        None
    }
}

/// Data-size weights `|train_i| / Σ |train_j|`.
pub fn init_weights(clients: &[ClientDataset]) -> Vec<f64> {
    let sizes: Vec<usize> = clients.iter().map(|c| c.train.len()).collect();
    data_size_weights(&sizes)
}

pub fn data_size_weights(sizes: &[usize]) -> Vec<f64> {
    let scores: Vec<f64> = sizes.iter().map(|n| *n as f64).collect();
    normalize(&scores).unwrap_or_else(|| vec![1.0 / sizes.len() as f64; sizes.len()])
}

/// `prev - current`, or 0 on the first round.
pub fn compute_loss_reduction(prev: Option<f64>, current: f64) -> f64 {
    match prev {
        Some(p) => p - current,
        None => 0.0,
    }
}

pub fn update_learning_rate(state: &ControlState, cfg: &ControlConfig, delta_loss: f64) -> f64 {
    (state.eta * (-cfg.gamma * delta_loss).exp()).clamp(cfg.eta_min, cfg.eta_max)
}

pub fn update_client_weights(cfg: &ControlConfig, updates: &[ClientUpdate]) -> Vec<f64> {
    let sizes: Vec<usize> = updates.iter().map(|u| u.num_examples).collect();
    let scores: Vec<f64> = match cfg.weight_source {
        WeightSource::DataSizeStatic => return data_size_weights(&sizes),
        WeightSource::LossReduction => updates
            .iter()
            .map(|u| cfg.weight_floor.max(u.train_loss_before - u.train_loss_after))
            .collect(),
        WeightSource::GradNorm => updates.iter().map(|u| cfg.weight_floor.max(u.grad_norm)).collect(),
    };
    normalize(&scores).unwrap_or_else(|| data_size_weights(&sizes))
}
