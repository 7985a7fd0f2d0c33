//! Optimizer and training loop for the node-edge predictor.
//!
//! A batch is a set of memories; every candidate edge of every registered
//! query contributes one binary cross-entropy term, with false edges
//! reweighted by the batch's true/false ratio so sparse positives are not
//! drowned out. Training shuffles memory order each epoch from the run seed
//! and is bit-reproducible.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{child_seed_u64, rng_from};
use crate::sgm::SceneGraphMemory;
use crate::tensor::{Matrix, Tape};

use super::model::{build_forward, NepConfig, NepParams, ParamCache};

/// Optimization hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Memories per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 1e-4, epochs: 25, batch_size: 100, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer state over named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    step: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new() -> Adam {
        Adam::default()
    }

    /// Applies one update with the given gradients; tensors without a
    /// gradient entry stay untouched.
    pub fn apply(&mut self, params: &mut NepParams, grads: &BTreeMap<String, Matrix>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (name, grad) in grads {
            let value = params
                .tensors_mut()
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown tensor '{name}'"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            let (md, vd, vals) = (m.data_mut(), v.data_mut(), value.data_mut());
            for ((g, m_i), (v_i, x)) in
                grad.data().iter().zip(md.iter_mut()).zip(vd.iter_mut().zip(vals.iter_mut()))
            {
                *m_i = ADAM_BETA1 * *m_i + (1.0 - ADAM_BETA1) * g;
                *v_i = ADAM_BETA2 * *v_i + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m_i / bc1;
                let v_hat = *v_i / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Per-edge loss weights: true edges weigh 1, false edges weigh the batch's
/// true/false count ratio (1 when there are no false edges).
pub(crate) fn class_weights(labels: &[bool]) -> Vec<f64> {
    let n_true = labels.iter().filter(|l| **l).count() as f64;
    let n_false = labels.len() as f64 - n_true;
    let false_weight = if n_false == 0.0 { 1.0 } else { n_true / n_false };
    labels.iter().map(|l| if *l { 1.0 } else { false_weight }).collect()
}

/// Mean weighted BCE over every labeled candidate edge in the batch, plus the
/// gradients for every parameter tensor.
pub fn batch_loss_and_gradients(
    params: &NepParams,
    batch: &[&SceneGraphMemory],
) -> Result<(f64, BTreeMap<String, Matrix>)> {
    if batch.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    let mut tape = Tape::new();
    let mut cache = ParamCache::new(params);
    let mut logit_blocks = Vec::new();
    let mut labels: Vec<bool> = Vec::new();
    for memory in batch {
        let requests: Vec<_> = memory
            .query_ids()
            .iter()
            .map(|&q| Ok((q, memory.candidate_edges(q)?)))
            .collect::<Result<_>>()?;
        if requests.is_empty() {
            return Err(Error::Dataset(format!(
                "memory at t={} has no queries to train on",
                memory.t()
            )));
        }
        let graph = build_forward(&mut tape, &mut cache, memory, &requests)?;
        for (_, keys) in &graph.groups {
            for key in keys {
                let label = memory.labels().get(key).ok_or_else(|| {
                    Error::Dataset(format!(
                        "candidate {} -[{}]-> {} has no label",
                        key.0, key.2, key.1
                    ))
                })?;
                labels.push(*label);
            }
        }
        logit_blocks.push(graph.logits);
    }
    let logits = if logit_blocks.len() == 1 {
        logit_blocks[0]
    } else {
        tape.concat_rows(&logit_blocks)
    };
    let label_values: Vec<f64> = labels.iter().map(|l| f64::from(u8::from(*l))).collect();
    let weights = class_weights(&labels);
    let loss = tape.weighted_bce_with_logits(logits, &label_values, &weights)?;
    let value = tape.value(loss).scalar();
    if !value.is_finite() {
        return Err(Error::Model(format!("non-finite loss {value}")));
    }
    let grads = tape.backward(loss);
    let by_name = cache
        .touched()
        .iter()
        .map(|(name, &id)| (name.clone(), grads.get(id, &tape)))
        .collect();
    Ok((value, by_name))
}

/// One optimizer step over a batch; returns the batch loss.
pub fn train_step(
    params: &mut NepParams,
    opt: &mut Adam,
    batch: &[&SceneGraphMemory],
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = batch_loss_and_gradients(params, batch)?;
    opt.apply(params, &grads, lr);
    Ok(loss)
}

/// Trains a fresh model on labeled memories; returns the parameters and the
/// per-epoch mean loss trace.
pub fn train(
    memories: &[SceneGraphMemory],
    model: NepConfig,
    config: &TrainConfig,
) -> Result<(NepParams, Vec<f64>)> {
    config.validate()?;
    if memories.is_empty() {
        return Err(Error::Dataset("training dataset is empty".into()));
    }
    for (i, memory) in memories.iter().enumerate() {
        if memory.query_ids().is_empty() || memory.labels().is_empty() {
            return Err(Error::Dataset(format!("memory {i} has no labeled queries")));
        }
    }
    let mut params = NepParams::init(model, child_seed_u64(config.seed, "model-init", 0))?;
    let mut opt = Adam::new();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..memories.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = rng_from(child_seed_u64(config.seed, "epoch-shuffle", epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&SceneGraphMemory> = chunk.iter().map(|&i| &memories[i]).collect();
            let loss = train_step(&mut params, &mut opt, &batch, config.learning_rate)
                .map_err(|e| Error::Training {
                    epoch,
                    batch: batch_idx,
                    message: e.to_string(),
                })?;
            epoch_losses.push(loss);
        }
        trace.push(epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64);
    }
    Ok((params, trace))
}
