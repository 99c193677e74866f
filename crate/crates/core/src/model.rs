//! Trainable classifier: multinomial logistic regression, or an MLP with ReLU
//! hidden layers.
//!
//! Parameters live in one flat [`ParamVector`] laid out layer by layer; each
//! layer stores its weight matrix (`out x in`, row-major) followed by its
//! bias vector.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::param::{ParamError, ParamVector};
use crate::rng::{self, mix64};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset has {data} features but the model expects {model}")]
    FeatureMismatch { data: usize, model: usize },
    #[error("model specs differ")]
    SpecMismatch,
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_layers: Vec::new(),
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.num_classes < 2 || self.hidden_layers.contains(&0) {
            return Err(ModelError::InvalidSpec(format!(
                "input_dim {} must be > 0, num_classes {} >= 2, hidden sizes > 0",
                self.input_dim, self.num_classes
            )));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_layers.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_layers);
        w.push(self.num_classes);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// `(weights_offset, bias_offset, fan_in, fan_out)` for every layer.
    pub fn layer_offsets(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut off = 0;
        self.widths()
            .windows(2)
            .map(|p| {
                let (fan_in, fan_out) = (p[0], p[1]);
                let w = off;
                let b = off + fan_in * fan_out;
                off = b + fan_out;
                (w, b, fan_in, fan_out)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParamVector,
}

impl Model {
    pub fn from_params(spec: ModelSpec, params: ParamVector) -> Result<Self, ModelError> {
        spec.validate()?;
        if params.dim() != spec.param_count() {
            return Err(ModelError::InvalidSpec(format!(
                "expected {} parameters, got {}",
                spec.param_count(),
                params.dim()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self, ModelError> {
        Self::from_params(self.spec.clone(), params)
    }

    /// Raw output scores for one input row.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut acts = Activations::new(&self.spec);
        forward(&self.spec, self.params.as_slice(), x, &mut acts);
        acts.layers.last().cloned().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub prox_mu: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate >= 0.0) || self.epochs == 0 || self.batch_size == 0 || !(self.prox_mu >= 0.0) {
            return Err(ModelError::InvalidSpec(format!(
                "need learning_rate >= 0, epochs > 0, batch_size > 0, prox_mu >= 0 (got {:?})",
                self
            )));
        }
        Ok(())
    }
}

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
    spec.validate()?;
    let mut r = rng::seeded(seed);
    let mut params = vec![0.0; spec.param_count()];
    for (w, b, fan_in, _) in spec.layer_offsets() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for p in &mut params[w..b] {
            *p = r.random_range(-bound..bound);
        }
    }
    Model::from_params(spec.clone(), ParamVector::new(params)?)
}

struct Activations {
    /// `layers[0]` is the input, the last entry holds the logits.
    layers: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Activations {
    fn new(spec: &ModelSpec) -> Self {
        let widths = spec.widths();
        Self {
            layers: widths.iter().map(|&w| vec![0.0; w]).collect(),
            deltas: widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }
}

fn forward(spec: &ModelSpec, params: &[f64], x: &[f64], acts: &mut Activations) {
    acts.layers[0].copy_from_slice(x);
    let offsets = spec.layer_offsets();
    let last = offsets.len() - 1;
    for (l, &(w, b, fan_in, fan_out)) in offsets.iter().enumerate() {
        let (prev, rest) = acts.layers.split_at_mut(l + 1);
        let input = &prev[l];
        let out = &mut rest[0];
        for j in 0..fan_out {
            let row = &params[w + j * fan_in..w + (j + 1) * fan_in];
            let mut z = params[b + j];
            for (wi, xi) in row.iter().zip(input) {
                z += wi * xi;
            }
            out[j] = if l == last { z } else { z.max(0.0) };
        }
    }
}

/// Numerically stable `(log-sum-exp(z) - z[label], softmax(z))`.
fn cross_entropy(logits: &[f64], label: usize, probs: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &z) in probs.iter_mut().zip(logits) {
        *p = (z - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    sum.ln() + max - logits[label]
}

/// Mean cross-entropy over `indices`, accumulating its gradient into `grad`.
fn ce_loss_and_grad(
    spec: &ModelSpec,
    params: &[f64],
    data: &Dataset,
    indices: &[usize],
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let offsets = spec.layer_offsets();
    let mut acts = Activations::new(spec);
    let scale = 1.0 / indices.len() as f64;
    let mut loss = 0.0;
    for &i in indices {
        forward(spec, params, data.row(i), &mut acts);
        let top = offsets.len();
        let mut probs = vec![0.0; spec.num_classes];
        loss += cross_entropy(&acts.layers[top], data.label(i), &mut probs);
        probs[data.label(i)] -= 1.0;
        for (d, p) in acts.deltas[top].iter_mut().zip(&probs) {
            *d = p * scale;
        }
        for l in (0..offsets.len()).rev() {
            let (w, b, fan_in, fan_out) = offsets[l];
            let (lower, upper) = acts.deltas.split_at_mut(l + 1);
            let delta = &upper[0];
            let input = &acts.layers[l];
            for j in 0..fan_out {
                let dj = delta[j];
                grad[b + j] += dj;
                let g_row = &mut grad[w + j * fan_in..w + (j + 1) * fan_in];
                for (g, xi) in g_row.iter_mut().zip(input) {
                    *g += dj * xi;
                }
            }
            if l > 0 {
                let below = &mut lower[l];
                below.iter_mut().for_each(|d| *d = 0.0);
                for j in 0..fan_out {
                    let dj = delta[j];
                    let row = &params[w + j * fan_in..w + (j + 1) * fan_in];
                    for (d, wi) in below.iter_mut().zip(row) {
                        *d += dj * wi;
                    }
                }
                for (d, a) in below.iter_mut().zip(&acts.layers[l]) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }
    }
    loss * scale
}

/// Local objective: mean cross-entropy over `indices` plus
/// `(mu / 2) * ||params - anchor||^2`.
pub fn objective(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    anchor: &ParamVector,
    mu: f64,
) -> f64 {
    let mut grad = vec![0.0; model.params.dim()];
    let ce = ce_loss_and_grad(&model.spec, model.params.as_slice(), data, indices, &mut grad);
    ce + prox_penalty(model.params.as_slice(), anchor.as_slice(), mu)
}

fn prox_penalty(params: &[f64], anchor: &[f64], mu: f64) -> f64 {
    let mut sq = 0.0;
    for (p, a) in params.iter().zip(anchor) {
        sq += (p - a) * (p - a);
    }
    0.5 * mu * sq
}

/// Analytic gradient of [`objective`].
pub fn gradient(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    anchor: &ParamVector,
    mu: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; model.params.dim()];
    ce_loss_and_grad(&model.spec, model.params.as_slice(), data, indices, &mut grad);
    for ((g, p), a) in grad.iter_mut().zip(model.params.as_slice()).zip(anchor.as_slice()) {
        *g += mu * (p - a);
    }
    grad
}

fn check_data(spec: &ModelSpec, data: &Dataset) -> Result<(), ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if data.input_dim() != spec.input_dim {
        return Err(ModelError::FeatureMismatch {
            data: data.input_dim(),
            model: spec.input_dim,
        });
    }
    Ok(())
}

/// Minibatch SGD on cross-entropy with a FedProx proximal term anchored at
/// `global`.
///
/// The proximal term is applied as an exact proximal step,
/// `w <- (w - lr * g + lr * mu * w_global) / (1 + lr * mu)`, which reduces to
/// plain SGD for `mu = 0` and stays stable for arbitrarily large `mu`. The
/// last partial batch of each epoch is kept.
pub fn train_local(global: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<Model, ModelError> {
    cfg.validate()?;
    check_data(&global.spec, data)?;
    let anchor = global.params.as_slice();
    let mut w = anchor.to_vec();
    let mut grad = vec![0.0; w.len()];
    let lr = cfg.learning_rate;
    let shrink = 1.0 / (1.0 + lr * cfg.prox_mu);
    let pull = lr * cfg.prox_mu;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::seeded(mix64(cfg.seed ^ mix64(epoch as u64))));
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let loss = ce_loss_and_grad(&global.spec, &w, data, idx, &mut grad);
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch, batch });
            }
            for ((wk, gk), ak) in w.iter_mut().zip(&grad).zip(anchor) {
                *wk = (*wk - lr * gk + pull * ak) * shrink;
            }
        }
    }
    global.with_params(ParamVector::new(w)?)
}

/// Returns `(accuracy, mean cross-entropy)`. Argmax ties go to the lowest
/// class index.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, f64), ModelError> {
    check_data(&model.spec, data)?;
    let mut acts = Activations::new(&model.spec);
    let top = model.spec.hidden_layers.len() + 1;
    let mut probs = vec![0.0; model.spec.num_classes];
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..data.len() {
        forward(&model.spec, model.params.as_slice(), data.row(i), &mut acts);
        let logits = &acts.layers[top];
        let mut best = 0;
        for (c, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = c;
            }
        }
        if best == data.label(i) {
            correct += 1;
        }
        loss += cross_entropy(logits, data.label(i), &mut probs);
    }
    let n = data.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// `global - local`, componentwise.
pub fn compute_update(global: &Model, local: &Model) -> Result<ParamVector, ModelError> {
    if global.spec != local.spec {
        return Err(ModelError::SpecMismatch);
    }
    Ok(global.params.sub(&local.params)?)
}
