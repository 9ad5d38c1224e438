//! SGD with momentum, the step learning-rate schedule and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ContextProvider, Model};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub shuffle: bool,
    /// Seed of the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-2,
            momentum: 0.9,
            lr_decay: 0.1,
            decay_every: 45,
            max_epochs: 90,
            batch_size: 8,
            shuffle: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Parameter(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if self.decay_every < 1 {
            return Err(Error::Parameter("decay_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// `lr0 · decay^floor(epoch / every)`.
pub fn learning_rate(config: &TrainConfig, epoch: usize) -> f64 {
    config.lr0 * config.lr_decay.powi((epoch / config.decay_every) as i32)
}

/// Momentum buffers, one per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, params: &[Tensor]) -> Self {
        Self {
            momentum,
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// `v ← μv − lr·g; θ ← θ + v` for every block.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Vec<f64>],
        lr: f64,
    ) {
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((theta, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi - lr * gi;
                *theta += *vi;
            }
        }
    }
}

/// One update on a mini-batch; returns the batch's mean loss.
pub fn sgd_step(
    model: &mut Model,
    optimizer: &mut Sgd,
    dataset: &Dataset,
    batch: &[usize],
    provider: &ContextProvider,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = model.loss_and_gradients(dataset, batch, provider)?;
    for (p, g) in model.params.iter().zip(&grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter block '{}' (batch loss {loss})",
                p.name
            )));
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite batch loss {loss}")));
    }
    optimizer.step(model.params.iter_mut().map(|p| &mut p.tensor), &grads, lr);
    if let Some(p) = model.params.iter().find(|p| !p.tensor.is_finite()) {
        return Err(Error::Numeric(format!(
            "parameter block '{}' became non-finite after the update",
            p.name
        )));
    }
    Ok(loss)
}

/// Losses and learning rate of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, if any epoch ran.
    pub best_epoch: Option<usize>,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_loss\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.lr, r.train_loss, r.val_loss);
        }
        out
    }
}

/// Trains `model` in place and restores the parameters with the lowest
/// validation loss.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    val_set: &Dataset,
    provider: &ContextProvider,
    config: &TrainConfig,
) -> Result<TrainingHistory> {
    config.validate()?;
    let mut history = TrainingHistory::default();
    let mut optimizer = Sgd::new(
        config.momentum,
        &model.params.iter().map(|p| p.tensor.clone()).collect::<Vec<_>>(),
    );
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.max_epochs {
        let lr = learning_rate(config, epoch);
        if config.shuffle {
            order.sort_unstable();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let loss = sgd_step(model, &mut optimizer, train_set, batch, provider, lr)?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = model.mean_loss(val_set, provider)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        log::info!("epoch {epoch}: lr {lr:e}, train {train_loss:.6}, val {val_loss:.6}");
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.params.iter().map(|p| p.tensor.clone()).collect()));
            history.best_epoch = Some(epoch);
        }
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
    }

    if let Some((_, params)) = best {
        for (p, t) in model.params.iter_mut().zip(params) {
            p.tensor = t;
        }
    }
    Ok(history)
}
