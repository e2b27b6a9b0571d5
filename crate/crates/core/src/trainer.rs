//! Instruction fine-tuning: AdamW with decoupled weight decay, gradient
//! accumulation and seeded per-epoch shuffling.
//!
//! The objective is the mean over examples of each example's masked
//! next-token loss. A window of `batch_size × grad_accum` examples produces
//! one optimizer step; gradients of every example in the window are summed in
//! window order and divided by the number of examples actually seen, so the
//! micro-batch split never changes the step.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionMask, BackwardOptions, Gradients, TrainScope, Transformer};
use crate::tensor::Scalar;
use crate::tokenizer::EncodedExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub cutoff: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 4,
            grad_accum: 6,
            epochs: 3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            cutoff: 400,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.epochs == 0 {
            return fail("batch_size, grad_accum and epochs must be at least 1".into());
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(beta > 0.0 && beta < 1.0) {
                return fail(format!("{name} {beta} must lie in (0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return fail(format!("adam_eps {} must be positive", self.adam_eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.cutoff < crate::tokenizer::MIN_CUTOFF {
            return fail(format!("cutoff {} is below {}", self.cutoff, crate::tokenizer::MIN_CUTOFF));
        }
        Ok(())
    }
}

/// Hyperparameters of one AdamW update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWParams {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// One AdamW update of a single tensor. `step` is 1-based.
///
/// ```text
/// p ← p − lr·λ·p
/// m ← β1·m + (1−β1)·g        v ← β2·v + (1−β2)·g²
/// p ← p − lr · (m / (1−β1^t)) / (√(v / (1−β2^t)) + ε)
/// ```
pub fn adamw_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut Moments<T>,
    step: u64,
    hp: &AdamWParams,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("{} params, {} grads", params.len(), grads.len())));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    if state.m.is_empty() {
        state.m = vec![T::zero(); params.len()];
        state.v = vec![T::zero(); params.len()];
    }
    let t = step as i32;
    let c = |v: f64| T::from_f64_lossy(v);
    let (b1, b2) = (c(hp.beta1), c(hp.beta2));
    let bias1 = c(1.0 - hp.beta1.powi(t));
    let bias2 = c(1.0 - hp.beta2.powi(t));
    let lr = c(hp.lr);
    let decay = c(1.0 - hp.lr * hp.weight_decay);
    let eps = c(hp.eps);
    for i in 0..params.len() {
        let g = grads[i];
        let m = b1 * state.m[i] + (T::one() - b1) * g;
        let v = b2 * state.v[i] + (T::one() - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / bias1;
        let v_hat = v / bias2;
        params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// AdamW over the named tensors of a model.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub hp: AdamWParams,
    pub scope: TrainScope,
    step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(hp: AdamWParams, scope: TrainScope) -> Self {
        Self {
            hp,
            scope,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every tensor in scope. All gradients are checked for
    /// finiteness before any parameter changes.
    pub fn step(&mut self, model: &mut Transformer<T>, grads: &Gradients<T>) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let step = self.step + 1;
        for (name, kind, tensor) in model.tensors_mut() {
            if !self.scope.includes(kind) {
                continue;
            }
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::Shape(format!("no gradient for trainable tensor {name}")))?;
            let state = self.state.entry(name).or_default();
            adamw_step(&mut tensor.data, &g.data, state, step, &self.hp)?;
        }
        self.step = step;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    pub fn push(&mut self, loss: f64) {
        let step = self.points.last().map_or(1, |p| p.step + 1);
        self.points.push(LossPoint { step, loss });
    }

    pub fn first(&self) -> Option<f64> {
        self.points.first().map(|p| p.loss)
    }

    /// Least-squares slope of loss against step.
    pub fn slope(&self) -> Option<f64> {
        let n = self.points.len();
        if n < 2 {
            return None;
        }
        let nf = n as f64;
        let mx = self.points.iter().map(|p| p.step as f64).sum::<f64>() / nf;
        let my = self.points.iter().map(|p| p.loss).sum::<f64>() / nf;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for p in &self.points {
            let dx = p.step as f64 - mx;
            sxy += dx * (p.loss - my);
            sxx += dx * dx;
        }
        Some(sxy / sxx)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.step, p.loss));
        }
        out
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, String> {
        let mut curve = LossCurve::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            let (s, l) = line.split_once(',').ok_or_else(|| format!("line {}: missing comma", i + 1))?;
            curve.points.push(LossPoint {
                step: s.trim().parse().map_err(|e| format!("line {}: {e}", i + 1))?,
                loss: l.trim().parse().map_err(|e| format!("line {}: {e}", i + 1))?,
            });
        }
        Ok(curve)
    }
}

pub fn emit_loss_curve(curve: &LossCurve, path: &Path) -> Result<()> {
    fs::write(path, curve.to_csv()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub curve: LossCurve,
    /// Mean of the per-step losses within each epoch.
    pub epoch_mean_losses: Vec<f64>,
}

/// Per-epoch visiting order, seeded by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mixed = seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
    order
}

/// Mean loss and mean gradient over one accumulation window. The window is
/// given as micro-batches; the result depends only on the concatenated
/// example order.
pub fn window_gradient<T: Scalar>(
    model: &Transformer<T>,
    micro_batches: &[&[&EncodedExample]],
    opts: &BackwardOptions,
) -> Result<(f64, Gradients<T>)> {
    let mut acc = Gradients::new();
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    let mask = AttentionMask::causal();
    for batch in micro_batches {
        for ex in batch.iter() {
            let (inputs, targets, loss_mask) = ex.shifted();
            let (loss, grads) = model.backward(inputs, targets, loss_mask, &mask, opts)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("loss".into()));
            }
            loss_sum += loss;
            acc.accumulate(&grads);
            seen += 1;
        }
    }
    if seen == 0 {
        return Err(Error::EmptyCorpus);
    }
    acc.scale(T::from_f64_lossy(1.0 / seen as f64));
    Ok((loss_sum / seen as f64, acc))
}

/// Fine-tunes the tensors in `scope` and returns the per-step loss curve.
/// `on_step` sees `(epoch, step, loss)` after every optimizer step.
pub fn train<T: Scalar>(
    model: &mut Transformer<T>,
    corpus: &[EncodedExample],
    config: &TrainConfig,
    scope: TrainScope,
    mut on_step: impl FnMut(usize, usize, f64),
) -> Result<TrainReport> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if scope == TrainScope::Adapters && !model.has_adapters() {
        return Err(Error::InvalidConfig("adapter training requested on a model without adapters".into()));
    }
    if model.is_merged() {
        return Err(Error::InvalidConfig("cannot train while adapters are merged".into()));
    }
    for (i, ex) in corpus.iter().enumerate() {
        if ex.token_ids.len() > config.cutoff || ex.token_ids.len() > model.config.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "example {i} has {} tokens, above the cutoff",
                ex.token_ids.len()
            )));
        }
        if ex.scored_tokens() == 0 {
            return Err(Error::InvalidConfig(format!("example {i} has no output tokens left after truncation")));
        }
    }

    let uses_dropout = model
        .layers
        .iter()
        .flat_map(|b| [&b.wq, &b.wk, &b.wv, &b.wo])
        .any(|l| l.lora.as_ref().is_some_and(|f| f.dropout > 0.0));
    let mut optimizer = AdamW::new(AdamWParams::from(config), scope);
    let mut curve = LossCurve::default();
    let mut epoch_mean_losses = Vec::with_capacity(config.epochs);
    let window = config.effective_batch();

    for epoch in 0..config.epochs {
        let order = epoch_order(corpus.len(), config.seed, epoch);
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(window) {
            let examples: Vec<&EncodedExample> = chunk.iter().map(|&i| &corpus[i]).collect();
            let micro: Vec<&[&EncodedExample]> = examples.chunks(config.batch_size).collect();
            let opts = BackwardOptions {
                scope,
                dropout_seed: uses_dropout.then(|| config.seed ^ (optimizer.steps_taken() + 1).rotate_left(32)),
            };
            let (loss, grads) = window_gradient(model, &micro, &opts)?;
            optimizer.step(model, &grads)?;
            curve.push(loss);
            epoch_losses.push(loss);
            on_step(epoch, optimizer.steps_taken() as usize, loss);
        }
        epoch_mean_losses.push(epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64);
    }
    Ok(TrainReport {
        curve,
        epoch_mean_losses,
    })
}
