//! Mini-batch training with best-validation checkpoint selection.

use serde::{Deserialize, Serialize};

use super::{Model, PreparedSet};
use crate::data::Task;
use crate::error::{Error, Result};
use crate::metrics::{auprc, micro_auprc};
use crate::tensor::{Adam, RngStream, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            patience: 10,
            batch_size: 64,
            lr: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation AUPRC, or negative validation loss when it has no positives.
    pub valid_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<EpochRecord>,
    /// 0 when the initial parameters were never beaten.
    pub best_epoch: usize,
    pub best_valid: f64,
}

/// AUPRC for binary tasks, micro-AUPRC for diagnosis.
pub fn score(task: Task, pred: &Tensor, set: &PreparedSet) -> Result<f64> {
    let y = Tensor::matrix(set.len(), task.arity(), set.target_matrix())?;
    match task {
        Task::Dx => micro_auprc(pred, &y),
        _ => auprc(pred.data(), y.data()),
    }
}

/// Test metric of `model` on `set`.
pub fn evaluate(model: &Model, set: &PreparedSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    score(model.cfg.task, &model.predict(set)?, set)
}

fn selection_score(model: &Model, set: &PreparedSet) -> Result<f64> {
    let pred = model.predict(set)?;
    match score(model.cfg.task, &pred, set) {
        Err(Error::Metric(_)) => {
            let y = Tensor::matrix(set.len(), model.cfg.task.arity(), set.target_matrix())?;
            Ok(-super::task_loss(&pred, &y)?)
        }
        other => other,
    }
}

/// Trains `model` in place and leaves it at the best validation checkpoint.
pub fn train_model(
    model: &mut Model,
    train: &PreparedSet,
    valid: &PreparedSet,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Input(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let arity = model.cfg.task.arity();
    if train.arity() != arity || valid.arity() != arity {
        return Err(Error::Config(format!(
            "task {} expects {arity} outputs",
            model.cfg.task
        )));
    }
    let parts = model.parts()?;
    let mut adam = Adam::new(&model.store, cfg.lr);
    let mut best_store = model.store.clone();
    let mut best_valid = selection_score(model, valid)?;
    let mut best_epoch = 0;
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let target = Tensor::matrix(
                chunk.len(),
                arity,
                chunk
                    .iter()
                    .flat_map(|&i| train.targets[i].iter().copied())
                    .collect(),
            )?;
            let grads = {
                let mut tape = Tape::with_params(&model.store);
                let (p, _) = model.forward(&parts, &mut tape, train, chunk, true, rng)?;
                let loss = tape.binary_cross_entropy(p, target)?;
                let l = tape.value(loss).item();
                if !l.is_finite() {
                    return Err(Error::Numeric(format!(
                        "training loss became {l} in epoch {epoch}"
                    )));
                }
                total += l * chunk.len() as f64;
                tape.backward(loss)?.into_params()
            };
            adam.step(&mut model.store, &grads)?;
        }
        let valid_score = selection_score(model, valid)?;
        trace.push(EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            valid_score,
        });
        if valid_score > best_valid {
            best_valid = valid_score;
            best_epoch = epoch;
            best_store = model.store.clone();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    model.store = best_store;
    Ok(TrainReport {
        trace,
        best_epoch,
        best_valid,
    })
}
