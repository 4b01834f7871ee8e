use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{auc, spearman};
use super::{embedding_rows, RewardModel};
use crate::error::{Error, Result};
use crate::genmodel::{apply_gradients, BatchSampler};
use crate::numerics::{AdamConfig, Gradients, Graph};
use crate::rng::SeedTree;
use crate::simulator::InteractionLog;
use crate::tokenizer::{ItemEmbedding, ItemId};

/// One logged (history, session, labels) record; labels in tower order.
#[derive(Debug, Clone, PartialEq)]
pub struct RmSample {
    pub history: Vec<ItemId>,
    pub session: Vec<ItemId>,
    pub labels: [f64; 4],
}

pub fn rm_samples(logs: &[InteractionLog]) -> Vec<RmSample> {
    logs.iter()
        .map(|l| RmSample {
            history: l.history.clone(),
            session: l.session.clone(),
            labels: l.labels.as_array().map(|b| if b { 1.0 } else { 0.0 }),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        RmTrainConfig { steps: 4000, batch_size: 32, adam: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() } }
    }
}

fn sample_grad(model: &RewardModel, table: &[ItemEmbedding], s: &RmSample, weight: f64) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let hist = embedding_rows(table, &s.history)?;
    let sess = embedding_rows(table, &s.session)?;
    let loss = model.loss(&mut g, &hist, &sess, &s.labels)?;
    let value = g.value(loss).item();
    let scaled = g.scale(loss, weight);
    Ok((value, g.backward(scaled, &model.store)?))
}

/// Adam on the mean rmLoss over shuffled mini-batches. Returns the mean
/// batch loss of every step.
pub fn train_reward_model(
    model: &mut RewardModel,
    table: &[ItemEmbedding],
    samples: &[RmSample],
    cfg: &RmTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if cfg.steps > 0 && samples.is_empty() {
        return Err(Error::Argument("reward training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut sampler = BatchSampler::new(samples.len(), SeedTree::new(seed).stream("rm-batches"));
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let w = 1.0 / batch.len() as f64;
        let results: Vec<(f64, Gradients)> =
            batch.par_iter().map(|&i| sample_grad(model, table, &samples[i], w)).collect::<Result<_>>()?;
        losses.push(results.iter().map(|r| r.0).sum::<f64>() * w);
        let grads: Vec<Gradients> = results.into_iter().map(|r| r.1).collect();
        apply_gradients(&mut model.store, &grads, &cfg.adam);
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmEvaluation {
    pub samples: usize,
    /// Mean rmLoss.
    pub loss: f64,
    /// Per-target AUC in tower order; `None` when a target has one class only.
    pub auc: [Option<f64>; 4],
    /// Spearman correlation of the scalar score with the supplied reference
    /// values (for example ground-truth session values).
    pub spearman: Option<f64>,
}

/// Scores `samples` and reports loss, per-target AUC and, when `reference`
/// is given, rank correlation of the scalar score with it.
pub fn evaluate_reward_model(
    model: &RewardModel,
    table: &[ItemEmbedding],
    samples: &[RmSample],
    reference: Option<&[f64]>,
) -> Result<RmEvaluation> {
    if samples.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    if reference.is_some_and(|r| r.len() != samples.len()) {
        return Err(Error::Argument("one reference value per sample required".into()));
    }
    let preds: Vec<[f64; 4]> = samples
        .par_iter()
        .map(|s| Ok(model.predict_items(table, &s.history, &s.session)?.as_array()))
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        for (q, y) in p.iter().zip(&s.labels) {
            loss -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        }
    }
    let auc = std::array::from_fn(|t| {
        let scores: Vec<f64> = preds.iter().map(|p| p[t]).collect();
        let labels: Vec<bool> = samples.iter().map(|s| s.labels[t] > 0.5).collect();
        auc(&scores, &labels)
    });
    let spearman = reference.and_then(|r| {
        let scores: Vec<f64> = preds.iter().map(|p| model.combine(&super::RewardVector::from_array(*p))).collect();
        spearman(&scores, r)
    });
    Ok(RmEvaluation { samples: samples.len(), loss: loss / samples.len() as f64, auc, spearman })
}
