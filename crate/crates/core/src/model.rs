//! Small differentiable classifiers with hand-written backprop.
//!
//! Flat parameter layout:
//! - `logreg`: `W` (`num_classes x input_dim`, row-major), then `b` (`num_classes`).
//! - `mlp1`: `W1` (`hidden_dim x input_dim`), `b1` (`hidden_dim`),
//!   `W2` (`num_classes x hidden_dim`), `b2` (`num_classes`).
//!
//! Logits are `W x + b`; the hidden layer is `act(W1 x + b1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::rng::{fnv1a64, SeededRng};

const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logreg,
    Mlp1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation `x` and the activation value `y`.
    /// ReLU'(0) is 0.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Ignored by `logreg`.
    pub hidden_dim: usize,
    /// Ignored by `logreg`.
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::Logreg,
            input_dim: 8,
            num_classes: 4,
            hidden_dim: 16,
            activation: Activation::Tanh,
        }
    }
}

impl ModelSpec {
    pub fn logreg(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Logreg,
            input_dim,
            num_classes,
            ..Self::default()
        }
    }

    pub fn mlp1(input_dim: usize, hidden_dim: usize, num_classes: usize, activation: Activation) -> Self {
        Self {
            kind: ModelKind::Mlp1,
            input_dim,
            num_classes,
            hidden_dim,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::config("model.input_dim", "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "must be >= 2"));
        }
        if self.kind == ModelKind::Mlp1 && self.hidden_dim < 1 {
            return Err(Error::config("model.hidden_dim", "must be >= 1"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::Logreg => (self.input_dim + 1) * self.num_classes,
            ModelKind::Mlp1 => (self.input_dim + 1) * self.hidden_dim + (self.hidden_dim + 1) * self.num_classes,
        }
    }

    /// Stable hash of the fields that affect the parameter layout.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(40);
        match self.kind {
            ModelKind::Logreg => {
                bytes.push(0u8);
                bytes.extend_from_slice(&(self.input_dim as u64).to_le_bytes());
                bytes.extend_from_slice(&(self.num_classes as u64).to_le_bytes());
            }
            ModelKind::Mlp1 => {
                bytes.push(1u8);
                bytes.extend_from_slice(&(self.input_dim as u64).to_le_bytes());
                bytes.extend_from_slice(&(self.num_classes as u64).to_le_bytes());
                bytes.extend_from_slice(&(self.hidden_dim as u64).to_le_bytes());
                bytes.push(match self.activation {
                    Activation::Relu => 0,
                    Activation::Tanh => 1,
                });
            }
        }
        fnv1a64(&bytes)
    }

    /// `(rows, cols)` of each dense layer, input side first.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match self.kind {
            ModelKind::Logreg => vec![(self.num_classes, self.input_dim)],
            ModelKind::Mlp1 => vec![(self.hidden_dim, self.input_dim), (self.num_classes, self.hidden_dim)],
        }
    }
}

/// Flat parameter vector tagged with the fingerprint of its [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    fingerprint: u64,
}

impl ParamVector {
    pub fn new(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        math::check_len(spec.param_count(), values.len())?;
        if !math::all_finite(&values) {
            return Err(Error::Parameter("parameter values must be finite".into()));
        }
        Ok(Self {
            values,
            fingerprint: spec.fingerprint(),
        })
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
            fingerprint: spec.fingerprint(),
        }
    }

    /// Same fingerprint, new values. Finiteness is not checked.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            fingerprint: self.fingerprint,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn is_finite(&self) -> bool {
        math::all_finite(&self.values)
    }

    pub fn norm(&self) -> f64 {
        math::norm2(&self.values)
    }

    pub(crate) fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        self.check_fingerprint(spec.fingerprint())
    }

    pub(crate) fn check_fingerprint(&self, expected: u64) -> Result<()> {
        if self.fingerprint == expected {
            Ok(())
        } else {
            Err(Error::ModelMismatch {
                expected,
                got: self.fingerprint,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

/// One dense layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Split a flat vector into its layers.
pub fn unflatten(spec: &ModelSpec, params: &ParamVector) -> Result<Vec<DenseLayer>> {
    params.check_spec(spec)?;
    let mut offset = 0;
    let mut layers = Vec::new();
    for (rows, cols) in spec.layer_shapes() {
        let w = params.values[offset..offset + rows * cols].to_vec();
        offset += rows * cols;
        let b = params.values[offset..offset + rows].to_vec();
        offset += rows;
        layers.push(DenseLayer {
            weights: Matrix::from_row_major(rows, cols, w)?,
            bias: b,
        });
    }
    Ok(layers)
}

pub fn flatten(spec: &ModelSpec, layers: &[DenseLayer]) -> Result<ParamVector> {
    let shapes = spec.layer_shapes();
    math::check_len(shapes.len(), layers.len())?;
    let mut values = Vec::with_capacity(spec.param_count());
    for ((rows, cols), layer) in shapes.into_iter().zip(layers) {
        math::check_len(rows, layer.weights.rows())?;
        math::check_len(cols, layer.weights.cols())?;
        math::check_len(rows, layer.bias.len())?;
        values.extend_from_slice(layer.weights.as_slice());
        values.extend_from_slice(&layer.bias);
    }
    ParamVector::new(spec, values)
}

pub fn init_params(spec: &ModelSpec, rng: &mut SeededRng) -> Result<ParamVector> {
    spec.validate()?;
    let mut values = Vec::with_capacity(spec.param_count());
    for (rows, cols) in spec.layer_shapes() {
        let std = match spec.kind {
            ModelKind::Logreg => INIT_STD,
            ModelKind::Mlp1 => INIT_STD / (cols as f64).sqrt(),
        };
        for _ in 0..rows * cols {
            values.push(rng.gaussian(0.0, std)?);
        }
        values.extend(std::iter::repeat_n(0.0, rows));
    }
    ParamVector::new(spec, values)
}

/// `y = W x + b` reading `W` and `b` straight out of the flat slice.
fn affine(block: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let (w, b) = block.split_at(rows * cols);
    for r in 0..rows {
        out.push(math::dot_unchecked(&w[r * cols..(r + 1) * cols], x) + b[r]);
    }
}

struct Workspace {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

impl Workspace {
    fn new() -> Self {
        Self {
            pre: Vec::new(),
            hidden: Vec::new(),
            probs: Vec::new(),
        }
    }
}

fn forward_into(spec: &ModelSpec, theta: &[f64], x: &[f64], ws: &mut Workspace) {
    match spec.kind {
        ModelKind::Logreg => {
            affine(theta, spec.num_classes, spec.input_dim, x, &mut ws.probs);
        }
        ModelKind::Mlp1 => {
            let split = (spec.input_dim + 1) * spec.hidden_dim;
            affine(&theta[..split], spec.hidden_dim, spec.input_dim, x, &mut ws.pre);
            ws.hidden.clear();
            ws.hidden.extend(ws.pre.iter().map(|v| spec.activation.apply(*v)));
            affine(
                &theta[split..],
                spec.num_classes,
                spec.hidden_dim,
                &ws.hidden,
                &mut ws.probs,
            );
        }
    }
    math::softmax_in_place(&mut ws.probs);
}

fn check_example(spec: &ModelSpec, ex: &Example) -> Result<()> {
    math::check_len(spec.input_dim, ex.features.len())?;
    if ex.label >= spec.num_classes {
        return Err(Error::Index {
            index: ex.label,
            len: spec.num_classes,
        });
    }
    Ok(())
}

/// Class probabilities for one input.
pub fn forward(spec: &ModelSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    params.check_spec(spec)?;
    math::check_len(spec.input_dim, x.len())?;
    let mut ws = Workspace::new();
    forward_into(spec, &params.values, x, &mut ws);
    Ok(ws.probs)
}

/// Mean cross-entropy over `batch` and its gradient.
pub fn loss_and_grad(spec: &ModelSpec, params: &ParamVector, batch: &[Example]) -> Result<(f64, ParamVector)> {
    params.check_spec(spec)?;
    if batch.is_empty() {
        return Err(Error::Parameter("loss_and_grad needs a non-empty batch".into()));
    }
    let theta = &params.values;
    let mut grad = vec![0.0; theta.len()];
    let mut ws = Workspace::new();
    let mut delta_out = Vec::with_capacity(spec.num_classes);
    let mut delta_hidden = vec![0.0; spec.hidden_dim];
    let mut loss = 0.0;

    for ex in batch {
        check_example(spec, ex)?;
        forward_into(spec, theta, &ex.features, &mut ws);
        loss += math::cross_entropy(&ws.probs, ex.label)?;
        // The clipped loss is flat below the clip, so the example contributes no gradient.
        if ws.probs[ex.label] < math::PROB_CLIP {
            continue;
        }

        delta_out.clear();
        delta_out.extend_from_slice(&ws.probs);
        delta_out[ex.label] -= 1.0;

        match spec.kind {
            ModelKind::Logreg => {
                accumulate_outer(&mut grad, &delta_out, &ex.features);
            }
            ModelKind::Mlp1 => {
                let split = (spec.input_dim + 1) * spec.hidden_dim;
                let (g1, g2) = grad.split_at_mut(split);
                accumulate_outer(g2, &delta_out, &ws.hidden);

                let w2 = &theta[split..split + spec.num_classes * spec.hidden_dim];
                for h in 0..spec.hidden_dim {
                    let mut back = 0.0;
                    for c in 0..spec.num_classes {
                        back += w2[c * spec.hidden_dim + h] * delta_out[c];
                    }
                    delta_hidden[h] = back * spec.activation.derivative(ws.pre[h], ws.hidden[h]);
                }
                accumulate_outer(g1, &delta_hidden, &ex.features);
            }
        }
    }

    let scale = 1.0 / batch.len() as f64;
    for g in grad.iter_mut() {
        *g *= scale;
    }
    Ok((loss * scale, params.with_values(grad)))
}

/// `block[W] += delta ⊗ input`, `block[b] += delta`.
fn accumulate_outer(block: &mut [f64], delta: &[f64], input: &[f64]) {
    let cols = input.len();
    let (w, b) = block.split_at_mut(delta.len() * cols);
    for (r, d) in delta.iter().enumerate() {
        let row = &mut w[r * cols..(r + 1) * cols];
        for (slot, x) in row.iter_mut().zip(input) {
            *slot += d * x;
        }
        b[r] += d;
    }
}

/// `θ - η·grad`.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, eta: f64) -> Result<ParamVector> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::Parameter(format!("learning rate must be > 0, got {eta}")));
    }
    grad.check_fingerprint(params.fingerprint)?;
    let values = params
        .values
        .iter()
        .zip(&grad.values)
        .map(|(t, g)| t - eta * g)
        .collect();
    Ok(params.with_values(values))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean cross-entropy and argmax accuracy (ties go to the lowest class).
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, data: &[Example]) -> Result<Evaluation> {
    params.check_spec(spec)?;
    if data.is_empty() {
        return Err(Error::Parameter("evaluate needs non-empty data".into()));
    }
    let mut ws = Workspace::new();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for ex in data {
        check_example(spec, ex)?;
        forward_into(spec, &params.values, &ex.features, &mut ws);
        loss += math::cross_entropy(&ws.probs, ex.label)?;
        if math::argmax(&ws.probs) == ex.label {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}
