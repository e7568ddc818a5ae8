//! Synthetic Gaussian-mixture classification task split across clients.
//!
//! Class means: when `num_classes <= input_dim`, mean `k` is
//! `(class_separation / sqrt 2) * q_k`, where `q_k` are orthonormal columns of a
//! seeded random rotation (Gram-Schmidt on a Gaussian matrix), then centered.
//! Every pair of means is then exactly `class_separation` apart, like the
//! vertices of a regular simplex. With more classes than dimensions the means
//! are seeded Gaussian points, centered and rescaled so their mean pairwise
//! distance is `class_separation`.
//!
//! Client `i` draws everything from the child stream `("client", i)`:
//! its size (`round(m + sqrt(m) z)`, floor 2), its label mix
//! `Dirichlet(beta * 1)`, its covariate offset `N(0, feature_shift_std^2)` per
//! dimension, then its examples. The first `n - n_test` examples are train, the
//! rest test, with `n_test = clamp(round(n * test_fraction), 1, n - 1)`.
//!
//! The global test set has exactly balanced labels (example `j` has label
//! `j mod C` before shuffling) and no covariate shift.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Example;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataGenConfig {
    pub num_clients: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub examples_per_client_mean: usize,
    pub class_separation: f64,
    pub noise_std: f64,
    pub dirichlet_beta: f64,
    pub feature_shift_std: f64,
    pub test_fraction: f64,
    pub global_test_size: usize,
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            num_clients: 10,
            num_classes: 4,
            input_dim: 8,
            examples_per_client_mean: 100,
            class_separation: 3.0,
            noise_std: 1.0,
            dirichlet_beta: 0.5,
            feature_shift_std: 0.5,
            test_fraction: 0.25,
            global_test_size: 1000,
            seed: 0,
        }
    }
}

impl DataGenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("data.num_clients", self.num_clients),
            ("data.num_classes", self.num_classes),
            ("data.input_dim", self.input_dim),
            ("data.examples_per_client_mean", self.examples_per_client_mean),
            ("data.global_test_size", self.global_test_size),
        ];
        for (key, v) in counts {
            if v < 1 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config("data.num_classes", "must be >= 2"));
        }
        if !(self.dirichlet_beta > 0.0) || !self.dirichlet_beta.is_finite() {
            return Err(Error::config("data.dirichlet_beta", "must be finite and > 0"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("data.test_fraction", "must lie in (0, 1)"));
        }
        for (key, v) in [
            ("data.class_separation", self.class_separation),
            ("data.noise_std", self.noise_std),
            ("data.feature_shift_std", self.feature_shift_std),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(key, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    /// Per-class counts over `train`.
    pub label_histogram: Vec<usize>,
}

impl ClientDataset {
    pub fn new(client_id: usize, num_classes: usize, train: Vec<Example>, test: Vec<Example>) -> Self {
        let label_histogram = histogram(&train, num_classes);
        Self {
            client_id,
            train,
            test,
            label_histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedDataset {
    pub clients: Vec<ClientDataset>,
    pub global_test: Vec<Example>,
    pub config: DataGenConfig,
}

pub fn histogram(examples: &[Example], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for ex in examples {
        h[ex.label] += 1;
    }
    h
}

fn class_means(cfg: &DataGenConfig, rng: &mut SeededRng) -> Result<Vec<Vec<f64>>> {
    let (c, d) = (cfg.num_classes, cfg.input_dim);
    let mut means: Vec<Vec<f64>> = if c <= d {
        let basis = random_orthonormal(d, c, rng);
        let scale = cfg.class_separation / std::f64::consts::SQRT_2;
        basis
            .into_iter()
            .map(|q| q.into_iter().map(|v| v * scale).collect())
            .collect()
    } else {
        (0..c)
            .map(|_| (0..d).map(|_| rng.standard_normal()).collect())
            .collect()
    };

    let mut centroid = vec![0.0; d];
    for m in &means {
        for (acc, v) in centroid.iter_mut().zip(m) {
            *acc += v / c as f64;
        }
    }
    for m in means.iter_mut() {
        for (v, ctr) in m.iter_mut().zip(&centroid) {
            *v -= ctr;
        }
    }

    if c > d {
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..c {
            for j in i + 1..c {
                total += distance(&means[i], &means[j]);
                pairs += 1;
            }
        }
        let mean_dist = total / pairs as f64;
        if mean_dist > 0.0 {
            let s = cfg.class_separation / mean_dist;
            for m in means.iter_mut() {
                m.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    Ok(means)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `k` orthonormal vectors in `R^d` from modified Gram-Schmidt on Gaussian draws.
fn random_orthonormal(d: usize, k: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        for q in &basis {
            let proj: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    basis
}

fn sample_example(mean: &[f64], shift: &[f64], noise_std: f64, label: usize, rng: &mut SeededRng) -> Result<Example> {
    let mut x = Vec::with_capacity(mean.len());
    for (m, s) in mean.iter().zip(shift) {
        x.push(rng.gaussian(m + s, noise_std)?);
    }
    Ok(Example::new(x, label))
}

fn generate_client(cfg: &DataGenConfig, means: &[Vec<f64>], id: usize, root: &SeededRng) -> Result<ClientDataset> {
    let mut rng = root.derive("client", id as u64);
    let m = cfg.examples_per_client_mean as f64;
    let n = (m + m.sqrt() * rng.standard_normal()).round().max(2.0) as usize;
    let mix = rng.dirichlet(cfg.dirichlet_beta, cfg.num_classes)?;
    let shift: Vec<f64> = (0..cfg.input_dim)
        .map(|_| rng.gaussian(0.0, cfg.feature_shift_std))
        .collect::<Result<_>>()?;

    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.categorical(&mix);
        examples.push(sample_example(&means[label], &shift, cfg.noise_std, label, &mut rng)?);
    }
    let n_test = ((n as f64 * cfg.test_fraction).round() as usize).clamp(1, n - 1);
    let test = examples.split_off(n - n_test);
    Ok(ClientDataset::new(id, cfg.num_classes, examples, test))
}

pub fn generate(cfg: &DataGenConfig) -> Result<FederatedDataset> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed).derive("datagen", 0);
    let means = class_means(cfg, &mut root.derive("class-means", 0))?;

    let clients = (0..cfg.num_clients)
        .map(|i| generate_client(cfg, &means, i, &root))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = root.derive("global-test", 0);
    let zero_shift = vec![0.0; cfg.input_dim];
    let mut labels: Vec<usize> = (0..cfg.global_test_size).map(|j| j % cfg.num_classes).collect();
    rng.shuffle(&mut labels);
    let global_test = labels
        .into_iter()
        .map(|label| sample_example(&means[label], &zero_shift, cfg.noise_std, label, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    Ok(FederatedDataset {
        clients,
        global_test,
        config: cfg.clone(),
    })
}

/// Mean total-variation distance between each client's train label mix and the
/// pooled train label mix.
pub fn noniid_score(fd: &FederatedDataset) -> f64 {
    let hists: Vec<&[usize]> = fd.clients.iter().map(|c| c.label_histogram.as_slice()).collect();
    noniid_score_from_histograms(&hists)
}

pub fn noniid_score_from_histograms(hists: &[&[usize]]) -> f64 {
    if hists.is_empty() {
        return 0.0;
    }
    let k = hists.iter().map(|h| h.len()).max().unwrap_or(0);
    let mut pooled = vec![0usize; k];
    for h in hists {
        for (p, v) in pooled.iter_mut().zip(h.iter()) {
            *p += v;
        }
    }
    let total: usize = pooled.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let global: Vec<f64> = pooled.iter().map(|v| *v as f64 / total as f64).collect();

    let mut acc = 0.0;
    for h in hists {
        let n: usize = h.iter().sum();
        if n == 0 {
            continue;
        }
        let mut tv = 0.0;
        for (c, g) in global.iter().enumerate().take(k) {
            let p = h.get(c).copied().unwrap_or(0) as f64 / n as f64;
            tv += (p - g).abs();
        }
        acc += 0.5 * tv;
    }
    acc / hists.len() as f64
}
