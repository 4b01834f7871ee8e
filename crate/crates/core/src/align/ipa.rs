use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dpo_loss, resolve_items, sample_responses, select_pair, PairOutcome, PreferencePair, Scored};
use crate::error::{Error, Result};
use crate::genmodel::{apply_gradients, ntp_sample_grad, BatchSampler, GenModel, Sample, BATCH_STREAM};
use crate::numerics::{AdamConfig, Gradients, Graph};
use crate::reward::RewardModel;
use crate::rng::{Rng, SeedTree};
use crate::tokenizer::{ItemEmbedding, ItemId, ItemIndex};

/// Stream of the per-sample Bernoulli draws choosing the DPO branch. It is
/// separate from the batch stream, so `r_dpo` never changes the batch order.
pub const DPO_STREAM: &str = "ipa-dpo-draws";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    Beam,
    Temperature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IpaConfig {
    /// Responses sampled per selected user (N).
    pub responses: usize,
    pub r_dpo: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Epochs (T); the reference snapshot is refreshed after each.
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub sampling: SamplingMode,
    pub temperature: f64,
    pub use_kv_cache: bool,
}

impl Default for IpaConfig {
    fn default() -> Self {
        IpaConfig {
            responses: 16,
            r_dpo: 0.05,
            beta: 0.1,
            lambda: 1.0,
            epochs: 3,
            samples_per_epoch: 4000,
            batch_size: 16,
            adam: AdamConfig::default(),
            sampling: SamplingMode::Beam,
            temperature: 1.0,
            use_kv_cache: true,
        }
    }
}

impl IpaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.responses < 2 {
            return Err(Error::Config("responses must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.r_dpo) {
            return Err(Error::Config("r_dpo must lie in [0, 1]".into()));
        }
        if !(self.beta > 0.0) || !(self.lambda >= 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("beta and temperature must be positive, lambda non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples_per_epoch.div_ceil(self.batch_size)
    }
}

/// A training record: the generator sample plus the logged history items the
/// reward model reads.
#[derive(Debug, Clone, PartialEq)]
pub struct IpaSample {
    pub sample: Sample,
    pub history_items: Vec<ItemId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub mean_ntp_loss: f64,
    /// Samples routed to the DPO branch.
    pub dpo_draws: usize,
    pub pairs: usize,
    pub skipped: usize,
    pub mean_dpo_loss: f64,
    pub mean_winner_reward: f64,
    pub mean_loser_reward: f64,
    /// Pairs formed this epoch, kept only when requested.
    #[serde(skip)]
    pub pair_log: Vec<PreferencePair>,
}

struct DpoPart {
    outcome: PairOutcome,
    loss: f64,
    pair: Option<PreferencePair>,
    grads: Option<Gradients>,
}

pub(crate) struct IpaContext<'a> {
    pub rm: &'a RewardModel,
    pub table: &'a [ItemEmbedding],
    pub index: &'a ItemIndex,
}

fn dpo_part(
    policy: &GenModel,
    snapshot: &GenModel,
    ctx: &IpaContext<'_>,
    s: &IpaSample,
    cfg: &IpaConfig,
    weight: f64,
    rng: &mut Rng,
) -> Result<DpoPart> {
    let skip = |outcome| Ok(DpoPart { outcome, loss: 0.0, pair: None, grads: None });
    let enc = snapshot.encode_history(&s.sample.history)?;
    let temp = match cfg.sampling {
        SamplingMode::Beam => None,
        SamplingMode::Temperature => Some((cfg.temperature, rng)),
    };
    let hyps = sample_responses(snapshot, &enc, ctx.index, cfg.responses, temp, cfg.use_kv_cache)?;
    let mut scored = Vec::with_capacity(hyps.len());
    for h in &hyps {
        let items = resolve_items(ctx.index, &h.session)?;
        let reward = ctx.rm.score_items(ctx.table, &s.history_items, &items)?;
        scored.push(Scored { reward, log_prob: h.log_prob });
    }
    let Some((w, l)) = select_pair(&scored) else { return skip(PairOutcome::TooFewResponses) };
    if hyps[w].session == hyps[l].session {
        return skip(PairOutcome::IdenticalExtremes);
    }
    let pair = PreferencePair {
        history: s.sample.history.clone(),
        winner: hyps[w].session.clone(),
        loser: hyps[l].session.clone(),
        winner_reward: scored[w].reward,
        loser_reward: scored[l].reward,
    };
    let mut g = Graph::new();
    let loss = dpo_loss(&mut g, policy, snapshot, &pair, cfg.beta)?;
    let value = g.value(loss).item();
    let scaled = g.scale(loss, weight);
    let grads = g.backward(scaled, &policy.store)?;
    Ok(DpoPart { outcome: PairOutcome::Formed, loss: value, pair: Some(pair), grads: Some(grads) })
}

/// Runs `cfg.epochs` epochs of preference alignment on `model`.
///
/// Every step draws a batch from the same stream as seed training. Each
/// sample contributes `L_NTP / B`; with probability `r_dpo` it also samples
/// `responses` sessions from the epoch's frozen snapshot and scores them
/// with the reward model. The best/worst pairs formed in a batch add
/// `λ` times their mean `L_DPO`, so the objective per step is the batch
/// mean NTP loss plus `λ` times the batch mean DPO loss. The
/// snapshot is both sampler and DPO reference, and is refreshed after each
/// epoch. `on_epoch` sees the model after every epoch.
pub fn ipa_train(
    model: &mut GenModel,
    rm: &RewardModel,
    table: &[ItemEmbedding],
    index: &ItemIndex,
    data: &[IpaSample],
    cfg: &IpaConfig,
    seed: u64,
    keep_pairs: bool,
    mut on_epoch: impl FnMut(&GenModel, &EpochStats) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("alignment data is empty".into()));
    }
    let tree = SeedTree::new(seed);
    let mut sampler = BatchSampler::new(data.len(), tree.stream(BATCH_STREAM));
    let mut draws = tree.stream(DPO_STREAM);
    let ctx = IpaContext { rm, table, index };
    let mut all = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let snapshot = model.clone();
        let mut st = EpochStats { epoch, ..EpochStats::default() };
        let (mut ntp_sum, mut ntp_n) = (0.0, 0usize);
        let (mut dpo_sum, mut w_sum, mut l_sum) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.steps_per_epoch() {
            let batch = sampler.next_batch(cfg.batch_size);
            let w = 1.0 / batch.len() as f64;
            // Draws happen in batch order and per sample, before any parallel work.
            let chosen: Vec<Option<Rng>> = batch
                .iter()
                .map(|_| {
                    let hit = draws.gen::<f64>() < cfg.r_dpo;
                    let sub_seed: u64 = draws.gen();
                    hit.then(|| SeedTree::new(sub_seed).stream("responses"))
                })
                .collect();
            let current: &GenModel = model;
            let parts: Vec<(f64, Gradients, Option<DpoPart>)> = batch
                .par_iter()
                .zip(chosen.into_par_iter())
                .map(|(&i, rng)| {
                    let (loss, grads) = ntp_sample_grad(current, &data[i].sample, w)?;
                    let dpo = match rng {
                        Some(mut rng) => Some(dpo_part(current, &snapshot, &ctx, &data[i], cfg, cfg.lambda, &mut rng)?),
                        None => None,
                    };
                    Ok((loss, grads, dpo))
                })
                .collect::<Result<_>>()?;
            let formed = parts.iter().filter(|p| p.2.as_ref().is_some_and(|d| d.grads.is_some())).count();
            let mut grads = Vec::with_capacity(parts.len() + formed);
            for (loss, g, dpo) in parts {
                ntp_sum += loss;
                ntp_n += 1;
                grads.push(g);
                if let Some(d) = dpo {
                    st.dpo_draws += 1;
                    match d.outcome {
                        PairOutcome::Formed => {
                            st.pairs += 1;
                            dpo_sum += d.loss;
                            let pair = d.pair.expect("formed pair");
                            w_sum += pair.winner_reward;
                            l_sum += pair.loser_reward;
                            if keep_pairs {
                                st.pair_log.push(pair);
                            }
                            let mut g = d.grads.expect("formed pair has gradients");
                            g.scale(1.0 / formed as f64);
                            grads.push(g);
                        }
                        _ => st.skipped += 1,
                    }
                }
            }
            apply_gradients(&mut model.store, &grads, &cfg.adam);
            st.steps += 1;
        }
        st.mean_ntp_loss = if ntp_n > 0 { ntp_sum / ntp_n as f64 } else { 0.0 };
        if st.pairs > 0 {
            let p = st.pairs as f64;
            st.mean_dpo_loss = dpo_sum / p;
            st.mean_winner_reward = w_sum / p;
            st.mean_loser_reward = l_sum / p;
        }
        on_epoch(model, &st)?;
        all.push(st);
    }
    Ok(all)
}
