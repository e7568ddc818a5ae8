//! Client-side training, server-side aggregation and per-client personalization.

use serde::{Deserialize, Serialize};

use crate::datagen::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{self, Example, ModelSpec, ParamVector};
use crate::rng::SeededRng;

/// Step-halving attempts per fine-tuning step before giving up.
const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub shuffle: bool,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 10,
            batch_size: 8,
            shuffle: true,
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs < 1 {
            return Err(Error::config("local.local_epochs", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("local.batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonalizationMode {
    Off,
    Finetune,
    Interpolate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonalizationConfig {
    pub mode: PersonalizationMode,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Weight on the fine-tuned parameters in `interpolate` mode.
    pub alpha: f64,
}

impl Default for PersonalizationConfig {
    fn default() -> Self {
        Self {
            mode: PersonalizationMode::Finetune,
            finetune_epochs: 20,
            finetune_lr: 0.5,
            alpha: 0.5,
        }
    }
}

impl PersonalizationConfig {
    pub fn off() -> Self {
        Self {
            mode: PersonalizationMode::Off,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.finetune_lr > 0.0) || !self.finetune_lr.is_finite() {
            return Err(Error::config("personalization.finetune_lr", "must be finite and > 0"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("personalization.alpha", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParamVector,
    pub train_loss_before: f64,
    pub train_loss_after: f64,
    /// L2 norm of the mean mini-batch gradient over the last epoch.
    pub grad_norm: f64,
    pub num_examples: usize,
}

/// Mini-batch SGD on the client's train split, starting from `start`.
///
/// Batches are contiguous chunks of the (optionally shuffled) index order; the
/// last chunk may be short.
pub fn local_training(
    client: &ClientDataset,
    spec: &ModelSpec,
    start: &ParamVector,
    eta: f64,
    cfg: &LocalTrainConfig,
    rng: &mut SeededRng,
) -> Result<ClientUpdate> {
    cfg.validate()?;
    if !(eta > 0.0) {
        return Err(Error::Parameter(format!("learning rate must be > 0, got {eta}")));
    }
    let train = &client.train;
    if train.is_empty() {
        return Err(Error::Data(format!("client {} has no training data", client.client_id)));
    }

    let before = model::evaluate(spec, start, train)?.loss;
    let mut theta = start.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch: Vec<Example> = Vec::with_capacity(cfg.batch_size);
    let mut last_epoch_grad = vec![0.0; theta.len()];

    for epoch in 0..cfg.local_epochs {
        if cfg.shuffle {
            rng.shuffle(&mut order);
        }
        let last = epoch + 1 == cfg.local_epochs;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i].clone()));
            let (_, grad) = model::loss_and_grad(spec, &theta, &batch)?;
            if last {
                for (acc, g) in last_epoch_grad.iter_mut().zip(grad.values()) {
                    *acc += g;
                }
                batches += 1;
            }
            theta = model::sgd_step(&theta, &grad, eta)?;
        }
        if last {
            last_epoch_grad.iter_mut().for_each(|g| *g /= batches as f64);
        }
    }

    let after = model::evaluate(spec, &theta, train)?.loss;
    Ok(ClientUpdate {
        client_id: client.client_id,
        params: theta,
        train_loss_before: before,
        train_loss_after: after,
        grad_norm: crate::math::norm2(&last_epoch_grad),
        num_examples: train.len(),
    })
}

/// `Σ w_i θ_i / Σ w_i`, accumulated in client order.
///
/// The weights are normalized before accumulation, so multiplying every weight
/// by a power of two (or any factor that keeps `c * w_i` exact) leaves the
/// result bit-identical.
pub fn aggregate_parameters(updates: &[ClientUpdate], weights: &[f64]) -> Result<ParamVector> {
    let params: Vec<&ParamVector> = updates.iter().map(|u| &u.params).collect();
    aggregate(&params, weights)
}

pub fn aggregate(params: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if params.is_empty() {
        return Err(Error::Parameter("aggregation needs at least one client".into()));
    }
    crate::math::check_len(params.len(), weights.len())?;
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::Parameter(format!(
            "aggregation weights must be finite and >= 0, got {w}"
        )));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Parameter("aggregation weights sum to zero".into()));
    }
    let first = params[0];
    for p in &params[1..] {
        p.check_fingerprint(first.fingerprint())?;
    }

    let mut acc = vec![0.0; first.len()];
    for (p, w) in params.iter().zip(weights) {
        let share = w / total;
        for (a, v) in acc.iter_mut().zip(p.values()) {
            *a += share * v;
        }
    }
    Ok(first.with_values(acc))
}

/// Full-batch gradient descent with step halving. Train loss never increases.
fn finetune(spec: &ModelSpec, start: &ParamVector, data: &[Example], epochs: usize, lr: f64) -> Result<ParamVector> {
    let mut theta = start.clone();
    'epochs: for _ in 0..epochs {
        let (loss, grad) = model::loss_and_grad(spec, &theta, data)?;
        let mut step = lr;
        for _ in 0..=MAX_HALVINGS {
            let candidate = model::sgd_step(&theta, &grad, step)?;
            if candidate.is_finite() && model::evaluate(spec, &candidate, data)?.loss <= loss {
                theta = candidate;
                continue 'epochs;
            }
            step *= 0.5;
        }
        break;
    }
    Ok(theta)
}

/// Adapt the global parameters to one client's data.
pub fn personalize(
    cfg: &PersonalizationConfig,
    client: &ClientDataset,
    spec: &ModelSpec,
    global: &ParamVector,
) -> Result<ParamVector> {
    cfg.validate()?;
    global.check_spec(spec)?;
    if cfg.mode == PersonalizationMode::Off {
        return Ok(global.clone());
    }
    if client.train.is_empty() {
        return Err(Error::Data(format!("client {} has no training data", client.client_id)));
    }
    if cfg.mode == PersonalizationMode::Interpolate && cfg.alpha == 0.0 {
        return Ok(global.clone());
    }

    let tuned = finetune(spec, global, &client.train, cfg.finetune_epochs, cfg.finetune_lr)?;
    match cfg.mode {
        PersonalizationMode::Finetune => Ok(tuned),
        PersonalizationMode::Interpolate => {
            let a = cfg.alpha;
            let mixed = tuned
                .values()
                .iter()
                .zip(global.values())
                .map(|(t, g)| a * t + (1.0 - a) * g)
                .collect();
            Ok(global.with_values(mixed))
        }
        PersonalizationMode::Off => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DataGenConfig};
    use crate::model::{evaluate, init_params, Activation};

    fn dataset() -> crate::datagen::FederatedDataset {
        generate(&DataGenConfig {
            num_clients: 3,
            examples_per_client_mean: 60,
            global_test_size: 100,
            ..DataGenConfig::default()
        })
        .unwrap()
    }

    fn separable() -> ClientDataset {
        let mut rng = SeededRng::new(21);
        let mut train = Vec::new();
        for i in 0..40 {
            let label = i % 2;
            let center = if label == 0 { -2.0 } else { 2.0 };
            let x = vec![center + 0.3 * rng.standard_normal(), 0.3 * rng.standard_normal()];
            train.push(Example::new(x, label));
        }
        let test = train.split_off(32);
        ClientDataset::new(0, 2, train, test)
    }

    fn update(id: usize, spec: &ModelSpec, values: Vec<f64>) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            params: ParamVector::new(spec, values).unwrap(),
            train_loss_before: 1.0,
            train_loss_after: 0.5,
            grad_norm: 0.1,
            num_examples: 10,
        }
    }

    #[test]
    fn tiny_eta_is_a_no_op() {
        let fd = dataset();
        let spec = ModelSpec::logreg(8, 4);
        let start = init_params(&spec, &mut SeededRng::new(0)).unwrap();
        let u = local_training(
            &fd.clients[0],
            &spec,
            &start,
            1e-300,
            &LocalTrainConfig::default(),
            &mut SeededRng::new(1),
        )
        .unwrap();
        for (a, b) in u.params.values().iter().zip(start.values()) {
            assert!((a - b).abs() < 1e-290);
        }
        assert_eq!(u.train_loss_before, u.train_loss_after);
        assert_eq!(u.num_examples, fd.clients[0].train.len());
    }

    #[test]
    fn full_batch_epoch_is_one_step() {
        let fd = dataset();
        let client = &fd.clients[1];
        let spec = ModelSpec::logreg(8, 4);
        let start = init_params(&spec, &mut SeededRng::new(0)).unwrap();
        let cfg = LocalTrainConfig {
            local_epochs: 1,
            batch_size: client.train.len(),
            shuffle: false,
        };
        let u = local_training(client, &spec, &start, 0.1, &cfg, &mut SeededRng::new(3)).unwrap();
        let (_, g) = model::loss_and_grad(&spec, &start, &client.train).unwrap();
        assert_eq!(u.params, model::sgd_step(&start, &g, 0.1).unwrap());
        assert!((u.grad_norm - g.norm()).abs() < 1e-15);
    }

    #[test]
    fn separable_training_halves_loss() {
        let client = separable();
        let spec = ModelSpec::logreg(2, 2);
        let start = ParamVector::zeros(&spec);
        let cfg = LocalTrainConfig {
            local_epochs: 20,
            batch_size: 8,
            shuffle: true,
        };
        let u = local_training(&client, &spec, &start, 0.1, &cfg, &mut SeededRng::new(4)).unwrap();
        assert!(u.train_loss_after <= 0.5 * u.train_loss_before, "{u:?}");
    }

    #[test]
    fn local_training_is_reproducible() {
        let fd = dataset();
        let spec = ModelSpec::mlp1(8, 6, 4, Activation::Relu);
        let start = init_params(&spec, &mut SeededRng::new(0)).unwrap();
        let run = || {
            local_training(
                &fd.clients[2],
                &spec,
                &start,
                0.05,
                &LocalTrainConfig::default(),
                &mut SeededRng::new(9),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn local_training_errors() {
        let spec = ModelSpec::logreg(2, 2);
        let empty = ClientDataset::new(0, 2, vec![], vec![]);
        let cfg = LocalTrainConfig::default();
        let r = local_training(
            &empty,
            &spec,
            &ParamVector::zeros(&spec),
            0.1,
            &cfg,
            &mut SeededRng::new(0),
        );
        assert!(matches!(r, Err(Error::Data(_))));
        let zero_epochs = LocalTrainConfig { local_epochs: 0, ..cfg };
        let r = local_training(
            &separable(),
            &spec,
            &ParamVector::zeros(&spec),
            0.1,
            &zero_epochs,
            &mut SeededRng::new(0),
        );
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn aggregate_examples() {
        let spec = ModelSpec::logreg(1, 2);
        let a = update(0, &spec, vec![0.0, 1.0, 2.0, 3.0]);
        let b = update(1, &spec, vec![4.0, 1.0, 2.0, 3.0]);
        let g = aggregate_parameters(&[a.clone(), b], &[1.0, 3.0]).unwrap();
        assert_eq!(g.values(), &[3.0, 1.0, 2.0, 3.0]);

        let same = aggregate_parameters(&[a.clone(), a.clone(), a.clone()], &[0.2, 0.5, 0.3]).unwrap();
        assert_eq!(same.values(), a.params.values());
    }

    #[test]
    fn aggregate_errors() {
        let spec = ModelSpec::logreg(1, 2);
        let a = update(0, &spec, vec![0.0; 4]);
        assert!(matches!(
            aggregate_parameters(&[a.clone(), a.clone()], &[0.0, 0.0]),
            Err(Error::Parameter(_))
        ));
        assert!(aggregate_parameters(std::slice::from_ref(&a), &[-1.0]).is_err());
        assert!(aggregate_parameters(&[], &[]).is_err());
        assert!(matches!(
            aggregate_parameters(std::slice::from_ref(&a), &[1.0, 1.0]),
            Err(Error::Dimension { .. })
        ));

        let other = ModelSpec::logreg(2, 2);
        let b = update(1, &other, vec![0.0; 6]);
        assert!(matches!(
            aggregate_parameters(&[a, b], &[1.0, 1.0]),
            Err(Error::ModelMismatch { .. })
        ));
    }

    #[test]
    fn personalize_off_and_zero_alpha_are_identity() {
        let fd = dataset();
        let spec = ModelSpec::logreg(8, 4);
        let g = init_params(&spec, &mut SeededRng::new(2)).unwrap();
        let off = personalize(&PersonalizationConfig::off(), &fd.clients[0], &spec, &g).unwrap();
        assert_eq!(off, g);
        let interp = PersonalizationConfig {
            mode: PersonalizationMode::Interpolate,
            alpha: 0.0,
            ..PersonalizationConfig::default()
        };
        assert_eq!(personalize(&interp, &fd.clients[0], &spec, &g).unwrap(), g);
    }

    #[test]
    fn finetune_never_increases_train_loss() {
        let fd = dataset();
        for spec in [ModelSpec::logreg(8, 4), ModelSpec::mlp1(8, 5, 4, Activation::Tanh)] {
            let g = init_params(&spec, &mut SeededRng::new(2)).unwrap();
            // Deliberately huge rate so the halving path is exercised.
            for lr in [0.5, 50.0] {
                let cfg = PersonalizationConfig {
                    finetune_lr: lr,
                    ..PersonalizationConfig::default()
                };
                for c in &fd.clients {
                    let before = evaluate(&spec, &g, &c.train).unwrap().loss;
                    let p = personalize(&cfg, c, &spec, &g).unwrap();
                    let after = evaluate(&spec, &p, &c.train).unwrap().loss;
                    assert!(after <= before, "lr {lr}: {after} > {before}");
                }
            }
        }
    }

    #[test]
    fn interpolate_mixes_endpoints() {
        let fd = dataset();
        let spec = ModelSpec::logreg(8, 4);
        let g = init_params(&spec, &mut SeededRng::new(2)).unwrap();
        let tuned = personalize(&PersonalizationConfig::default(), &fd.clients[0], &spec, &g).unwrap();
        let cfg = PersonalizationConfig {
            mode: PersonalizationMode::Interpolate,
            alpha: 0.25,
            ..PersonalizationConfig::default()
        };
        let mixed = personalize(&cfg, &fd.clients[0], &spec, &g).unwrap();
        for k in 0..g.len() {
            let expect = 0.25 * tuned.values()[k] + 0.75 * g.values()[k];
            assert!((mixed.values()[k] - expect).abs() < 1e-15);
        }
        let full = PersonalizationConfig { alpha: 1.0, ..cfg };
        assert_eq!(personalize(&full, &fd.clients[0], &spec, &g).unwrap(), tuned);
    }

    #[test]
    fn personalization_config_validation() {
        let bad_lr = PersonalizationConfig {
            finetune_lr: 0.0,
            ..PersonalizationConfig::default()
        };
        assert!(bad_lr.validate().is_err());
        let bad_alpha = PersonalizationConfig {
            alpha: 1.5,
            ..PersonalizationConfig::default()
        };
        assert!(bad_alpha.validate().is_err());
    }
}
