//! The round loop: broadcast, local training, re-weighting, aggregation,
//! learning-rate feedback, evaluation and personalization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{self, ControlConfig, ControlState};
use crate::datagen::{self, DataGenConfig, FederatedDataset};
use crate::error::{Error, Result};
use crate::fed::{self, ClientUpdate, LocalTrainConfig, PersonalizationConfig, PersonalizationMode};
use crate::model::{self, Example, ModelSpec, ParamVector};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub rounds: usize,
    pub model: ModelSpec,
    /// `data.seed` is overwritten with `master_seed` by [`SimulationConfig::resolved`].
    pub data: DataGenConfig,
    pub local: LocalTrainConfig,
    pub control: ControlConfig,
    pub personalization: PersonalizationConfig,
    pub master_seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            model: ModelSpec::default(),
            data: DataGenConfig::default(),
            local: LocalTrainConfig::default(),
            control: ControlConfig::default(),
            personalization: PersonalizationConfig::default(),
            master_seed: 0,
        }
    }
}

impl SimulationConfig {
    /// Copy with every seed derived from `master_seed`.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.data.seed = cfg.master_seed;
        cfg
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.master_seed = seed;
        cfg.resolved()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::config("rounds", "must be >= 1"));
        }
        self.model.validate()?;
        self.data.validate()?;
        if self.model.input_dim != self.data.input_dim {
            return Err(Error::config("model.input_dim", "must equal data.input_dim"));
        }
        if self.model.num_classes != self.data.num_classes {
            return Err(Error::config("model.num_classes", "must equal data.num_classes"));
        }
        self.local.validate()?;
        self.control.validate()?;
        self.personalization.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundMetrics {
    pub client_id: usize,
    pub weight: f64,
    pub local_loss_before: f64,
    pub local_loss_after: f64,
    pub grad_norm: f64,
    pub baseline_accuracy: f64,
    pub personalized_accuracy: f64,
    /// Train loss of the global model on this client.
    pub personalize_loss_before: f64,
    /// Train loss of the personalized model on this client.
    pub personalize_loss_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Learning rate used by local training in this round.
    pub eta: f64,
    pub global_loss: f64,
    pub global_accuracy: f64,
    pub validation_loss: f64,
    pub delta_loss: f64,
    pub weights: Vec<f64>,
    pub clients: Vec<ClientRoundMetrics>,
}

impl RoundMetrics {
    pub fn mean_personalization_gain(&self) -> f64 {
        let n = self.clients.len() as f64;
        self.clients
            .iter()
            .map(|c| c.personalized_accuracy - c.baseline_accuracy)
            .sum::<f64>()
            / n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub rounds: Vec<RoundMetrics>,
    pub final_global: ParamVector,
    /// Personalized parameters from the last round, one per client.
    pub personalized: Vec<ParamVector>,
    pub noniid_score: f64,
    pub config: SimulationConfig,
}

impl SimulationResult {
    pub fn last_round(&self) -> &RoundMetrics {
        self.rounds.last().expect("at least one round")
    }

    pub fn eta_trajectory(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.eta).collect()
    }
}

/// Hooks for inspecting a run while it executes. Called from worker threads
/// when client fan-out is parallel.
pub trait RoundObserver: Sync {
    fn on_local_start(&self, _round: usize, _client_id: usize, _start: &ParamVector) {}

    fn on_aggregate(&self, _round: usize, _previous: &ParamVector, _updates: &[ClientUpdate], _next: &ParamVector) {}
}

/// Observer that ignores every event.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoObserver;

impl RoundObserver for NoObserver {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub parallel: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { parallel: true }
    }
}

/// Global test split into a validation half (feeds the controller) and a
/// test half (reported metrics).
fn split_global(global: &[Example]) -> (&[Example], &[Example]) {
    let mid = (global.len() / 2).max(1).min(global.len().saturating_sub(1));
    global.split_at(mid)
}

fn map_clients<T, F>(parallel: bool, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

pub fn run_simulation(cfg: &SimulationConfig) -> Result<SimulationResult> {
    run_simulation_with(cfg, RunOptions::default(), &NoObserver)
}

pub fn run_simulation_with(
    cfg: &SimulationConfig,
    opts: RunOptions,
    observer: &dyn RoundObserver,
) -> Result<SimulationResult> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let data = datagen::generate(&cfg.data)?;
    run_on_dataset(&cfg, &data, opts, observer)
}

/// Run on an already generated dataset. `cfg` must already be resolved.
pub fn run_on_dataset(
    cfg: &SimulationConfig,
    data: &FederatedDataset,
    opts: RunOptions,
    observer: &dyn RoundObserver,
) -> Result<SimulationResult> {
    cfg.validate()?;
    if data.global_test.len() < 2 {
        return Err(Error::Data("global test set needs at least 2 examples".into()));
    }
    let spec = &cfg.model;
    let master = SeededRng::new(cfg.master_seed);
    let (validation, test) = split_global(&data.global_test);
    let n = data.clients.len();

    let mut global = model::init_params(spec, &mut master.derive("init", 0))?;
    let static_weights = control::init_weights(&data.clients);
    let mut state = ControlState::new(&cfg.control, static_weights.clone());
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut personalized = vec![global.clone(); n];

    for round in 1..=cfg.rounds {
        let eta = state.eta;
        let updates = map_clients(opts.parallel, n, |i| {
            let client = &data.clients[i];
            observer.on_local_start(round, client.client_id, &global);
            let mut rng = master.derive("local", round as u64).derive("client", i as u64);
            fed::local_training(client, spec, &global, eta, &cfg.local, &mut rng)
        })?;

        let weights = if cfg.control.enabled {
            control::update_client_weights(&cfg.control, &updates)
        } else {
            static_weights.clone()
        };
        let next = fed::aggregate_parameters(&updates, &weights)?;
        if !next.is_finite() {
            return Err(Error::Divergence { round });
        }
        observer.on_aggregate(round, &global, &updates, &next);
        global = next;

        let validation_loss = model::evaluate(spec, &global, validation)?.loss;
        let reported = model::evaluate(spec, &global, test)?;
        if !validation_loss.is_finite() || !reported.loss.is_finite() {
            return Err(Error::Divergence { round });
        }
        let delta_loss = control::compute_loss_reduction(state.prev_global_loss, validation_loss);
        state.prev_global_loss = Some(validation_loss);
        if cfg.control.enabled {
            state.eta = control::update_learning_rate(&state, &cfg.control, delta_loss);
        }
        state.weights = weights.clone();
        state.round = round;

        let per_client = map_clients(opts.parallel, n, |i| {
            let client = &data.clients[i];
            let own = fed::personalize(&cfg.personalization, client, spec, &global)?;
            let baseline = model::evaluate(spec, &global, &client.test)?.accuracy;
            let (personalized_accuracy, loss_before, loss_after) =
                if cfg.personalization.mode == PersonalizationMode::Off {
                    let l = model::evaluate(spec, &global, &client.train)?.loss;
                    (baseline, l, l)
                } else {
                    (
                        model::evaluate(spec, &own, &client.test)?.accuracy,
                        model::evaluate(spec, &global, &client.train)?.loss,
                        model::evaluate(spec, &own, &client.train)?.loss,
                    )
                };
            let u = &updates[i];
            let metrics = ClientRoundMetrics {
                client_id: client.client_id,
                weight: weights[i],
                local_loss_before: u.train_loss_before,
                local_loss_after: u.train_loss_after,
                grad_norm: u.grad_norm,
                baseline_accuracy: baseline,
                personalized_accuracy,
                personalize_loss_before: loss_before,
                personalize_loss_after: loss_after,
            };
            Ok((metrics, own))
        })?;

        let mut clients = Vec::with_capacity(n);
        for (i, (m, own)) in per_client.into_iter().enumerate() {
            clients.push(m);
            personalized[i] = own;
        }
        rounds.push(RoundMetrics {
            round,
            eta,
            global_loss: reported.loss,
            global_accuracy: reported.accuracy,
            validation_loss,
            delta_loss,
            weights,
            clients,
        });
    }

    Ok(SimulationResult {
        rounds,
        final_global: global,
        personalized,
        noniid_score: datagen::noniid_score(data),
        config: cfg.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub personalization_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub control: bool,
    pub personalization: bool,
    pub mean_final_accuracy: f64,
    pub mean_final_loss: f64,
    pub mean_personalization_gain: f64,
    pub per_seed: Vec<SeedOutcome>,
}

impl ArmReport {
    pub fn label(&self) -> String {
        arm_label(self.control, self.personalization)
    }
}

pub fn arm_label(control: bool, personalization: bool) -> String {
    let on_off = |b: bool| if b { "on" } else { "off" };
    format!(
        "control-{}_personalization-{}",
        on_off(control),
        on_off(personalization)
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub arms: Vec<ArmReport>,
}

impl ComparisonReport {
    pub fn arm(&self, control: bool, personalization: bool) -> Option<&ArmReport> {
        self.arms
            .iter()
            .find(|a| a.control == control && a.personalization == personalization)
    }
}

/// One arm's run on one seed.
#[derive(Debug, Clone)]
pub struct ArmRun {
    pub control: bool,
    pub personalization: bool,
    pub seed: u64,
    pub result: SimulationResult,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub report: ComparisonReport,
    pub runs: Vec<ArmRun>,
}

/// Arms in report order: (control, personalization).
pub const ARMS: [(bool, bool); 4] = [(false, false), (false, true), (true, false), (true, true)];

fn arm_config(base: &SimulationConfig, control: bool, personalization: bool) -> SimulationConfig {
    let mut cfg = base.clone();
    cfg.control.enabled = control;
    if !personalization {
        cfg.personalization.mode = PersonalizationMode::Off;
    } else if cfg.personalization.mode == PersonalizationMode::Off {
        cfg.personalization.mode = PersonalizationMode::Finetune;
    }
    cfg
}

/// Four arms per seed, {control off/on} x {personalization off/on}, all on the
/// same generated dataset for that seed.
pub fn run_comparison(cfg: &SimulationConfig, seeds: &[u64]) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(Error::Parameter("comparison needs at least one seed".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len() * ARMS.len());
    for &seed in seeds {
        let seeded = cfg.with_seed(seed);
        seeded.validate()?;
        let data = datagen::generate(&seeded.data)?;
        for (control, personalization) in ARMS {
            let arm = arm_config(&seeded, control, personalization);
            let result = run_on_dataset(&arm, &data, RunOptions::default(), &NoObserver)?;
            runs.push(ArmRun {
                control,
                personalization,
                seed,
                result,
            });
        }
    }

    let arms = ARMS
        .iter()
        .map(|&(control, personalization)| {
            let per_seed: Vec<SeedOutcome> = runs
                .iter()
                .filter(|r| r.control == control && r.personalization == personalization)
                .map(|r| {
                    let last = r.result.last_round();
                    SeedOutcome {
                        seed: r.seed,
                        final_accuracy: last.global_accuracy,
                        final_loss: last.global_loss,
                        personalization_gain: last.mean_personalization_gain(),
                    }
                })
                .collect();
            let k = per_seed.len() as f64;
            ArmReport {
                control,
                personalization,
                mean_final_accuracy: per_seed.iter().map(|s| s.final_accuracy).sum::<f64>() / k,
                mean_final_loss: per_seed.iter().map(|s| s.final_loss).sum::<f64>() / k,
                mean_personalization_gain: per_seed.iter().map(|s| s.personalization_gain).sum::<f64>() / k,
                per_seed,
            }
        })
        .collect();

    Ok(Comparison {
        report: ComparisonReport { arms },
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimulationConfig {
        SimulationConfig {
            rounds: 3,
            data: DataGenConfig {
                num_clients: 4,
                examples_per_client_mean: 40,
                global_test_size: 200,
                ..DataGenConfig::default()
            },
            ..SimulationConfig::default()
        }
    }

    #[test]
    fn single_client_single_round_is_local_training() {
        let mut cfg = small();
        cfg.rounds = 1;
        cfg.data.num_clients = 1;
        cfg.personalization = PersonalizationConfig::off();
        let cfg = cfg.resolved();
        let res = run_simulation(&cfg).unwrap();

        let data = datagen::generate(&cfg.data).unwrap();
        let master = SeededRng::new(cfg.master_seed);
        let start = model::init_params(&cfg.model, &mut master.derive("init", 0)).unwrap();
        let mut rng = master.derive("local", 1).derive("client", 0);
        let u = fed::local_training(
            &data.clients[0],
            &cfg.model,
            &start,
            cfg.control.eta0,
            &cfg.local,
            &mut rng,
        )
        .unwrap();
        assert_eq!(res.final_global, u.params);
    }

    #[test]
    fn disabled_control_keeps_eta() {
        let mut cfg = small();
        cfg.control.enabled = false;
        let res = run_simulation(&cfg).unwrap();
        assert!(res.rounds.iter().all(|r| r.eta == cfg.control.eta0));
        let w0 = &res.rounds[0].weights;
        assert!(res.rounds.iter().all(|r| &r.weights == w0));
    }

    #[test]
    fn first_round_has_no_feedback() {
        let res = run_simulation(&small()).unwrap();
        assert_eq!(res.rounds[0].delta_loss, 0.0);
        assert_eq!(res.rounds[0].eta, res.rounds[1].eta);
    }

    #[test]
    fn config_mismatch_is_reported() {
        let mut cfg = small();
        cfg.model.input_dim = 3;
        assert!(matches!(run_simulation(&cfg), Err(Error::Config { key, .. }) if key == "model.input_dim"));
        let mut cfg = small();
        cfg.rounds = 0;
        assert!(matches!(run_simulation(&cfg), Err(Error::Config { key, .. }) if key == "rounds"));
    }

    #[test]
    fn divergence_names_the_round() {
        let mut cfg = small();
        cfg.control.enabled = false;
        cfg.control.eta_max = f64::MAX;
        cfg.control.eta0 = 1e308;
        cfg.data.class_separation = 50.0;
        match run_simulation(&cfg) {
            Err(Error::Divergence { round }) => assert_eq!(round, 1),
            other => panic!(
                "expected divergence, got {:?}",
                other.map(|r| r.last_round().global_loss)
            ),
        }
    }

    #[test]
    fn seeds_share_data_across_arms() {
        let cmp = run_comparison(&small(), &[3]).unwrap();
        assert_eq!(cmp.runs.len(), 4);
        let scores: Vec<f64> = cmp.runs.iter().map(|r| r.result.noniid_score).collect();
        assert!(scores.windows(2).all(|w| w[0] == w[1]));
        for run in cmp.runs.iter().filter(|r| !r.personalization) {
            for round in &run.result.rounds {
                for c in &round.clients {
                    assert_eq!(c.personalized_accuracy, c.baseline_accuracy);
                }
            }
        }
    }

    #[test]
    fn comparison_requires_seeds() {
        assert!(run_comparison(&small(), &[]).is_err());
    }
}
