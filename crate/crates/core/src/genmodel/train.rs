use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genmodel::model::{GenModel, Sample};
use crate::numerics::{AdamConfig, Gradients, Graph, ParamStore};
use crate::rng::{Rng, SeedTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Held-out evaluation period in steps (0 disables periodic evaluation).
    pub eval_every: usize,
    /// Stop once the held-out loss reaches this value.
    pub target_eval_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 1000, batch_size: 16, adam: AdamConfig::default(), eval_every: 100, target_eval_loss: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// (step, mean training loss of the batch)
    pub train_loss: Vec<(usize, f64)>,
    /// (step, held-out loss)
    pub eval_loss: Vec<(usize, f64)>,
    pub steps_run: usize,
    pub reached_target: bool,
}

/// Reshuffled passes over `0..n`, handing out fixed-size batches.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(n: usize, rng: Rng) -> Self {
        BatchSampler { order: (0..n).collect(), pos: n, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Loss value and parameter gradients of `weight · ntp_loss(sample)`.
pub fn ntp_sample_grad(model: &GenModel, sample: &Sample, weight: f64) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let loss = model.ntp_loss(&mut g, sample)?;
    let value = g.value(loss).item();
    let scaled = g.scale(loss, weight);
    Ok((value, g.backward(scaled, &model.store)?))
}

/// Adds per-sample gradients into the store in the given order and applies
/// one Adam update. Order-fixed summation keeps results independent of how
/// the per-sample work was scheduled.
pub fn apply_gradients(store: &mut ParamStore, grads: &[Gradients], adam: &AdamConfig) {
    store.zero_grad();
    for g in grads {
        store.accumulate(g);
    }
    store.adam_step(adam);
}

/// One optimizer step on the mean NTP loss of `batch`. Returns the mean loss.
pub fn ntp_step(model: &mut GenModel, samples: &[Sample], batch: &[usize], adam: &AdamConfig) -> Result<f64> {
    let w = 1.0 / batch.len() as f64;
    let results: Vec<(f64, Gradients)> =
        batch.par_iter().map(|&i| ntp_sample_grad(model, &samples[i], w)).collect::<Result<_>>()?;
    let mean = results.iter().map(|r| r.0).sum::<f64>() * w;
    let grads: Vec<Gradients> = results.into_iter().map(|r| r.1).collect();
    apply_gradients(&mut model.store, &grads, adam);
    Ok(mean)
}

pub fn mean_eval_loss(model: &GenModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let losses: Vec<f64> = samples.par_iter().map(|s| model.eval_loss(s)).collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

/// Stream name of the batch order, shared with preference alignment so that
/// both walk the data identically under one seed.
pub const BATCH_STREAM: &str = "ntp-batches";

/// Adam training on the NTP loss. `held_out` is evaluated every
/// `eval_every` steps and at the end; training stops early once the
/// held-out loss reaches `target_eval_loss`.
pub fn train_seed_model(
    model: &mut GenModel,
    train: &[Sample],
    held_out: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut sampler = BatchSampler::new(train.len(), SeedTree::new(seed).stream(BATCH_STREAM));
    let mut report = TrainReport::default();
    let evaluate = |model: &GenModel, report: &mut TrainReport, step: usize| -> Result<bool> {
        if held_out.is_empty() {
            return Ok(false);
        }
        let l = mean_eval_loss(model, held_out)?;
        report.eval_loss.push((step, l));
        Ok(cfg.target_eval_loss.is_some_and(|t| l <= t))
    };
    for step in 1..=cfg.steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let loss = ntp_step(model, train, &batch, &cfg.adam)?;
        report.train_loss.push((step, loss));
        report.steps_run = step;
        on_progress(step, loss);
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && evaluate(model, &mut report, step)? {
            report.reached_target = true;
            return Ok(report);
        }
    }
    if report.eval_loss.last().map(|e| e.0) != Some(report.steps_run) {
        let last = report.steps_run;
        report.reached_target = evaluate(model, &mut report, last)?;
    }
    Ok(report)
}

/// Tokens routed to each expert of each decoder layer over `samples`.
pub fn gate_usage(model: &GenModel, samples: &[Sample]) -> Result<Vec<Vec<u64>>> {
    let mut counts = vec![vec![0u64; model.config.moe_experts]; model.config.decoder_layers];
    for s in samples {
        let mut g = Graph::inference();
        let enc = model.encode(&mut g, &s.history, None)?;
        let cross = model.cross_kv(&mut g, enc);
        let (_, routing) = model.decode(&mut g, &cross, &s.decoder.input, None)?;
        for (layer, rows) in routing.iter().enumerate() {
            for r in rows {
                for &e in r {
                    counts[layer][e] += 1;
                }
            }
        }
    }
    Ok(counts)
}
