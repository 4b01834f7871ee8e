//! Iterative preference alignment: sample sessions from a frozen snapshot,
//! rank them with the reward model, and train on NTP plus a DPO loss over the
//! best and worst of them.

mod eval;
mod ipa;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genmodel::{beam_search, build_decoder_tokens, sample_session, BeamOptions, EncodedHistory, GenModel, Hypothesis, Sample};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::Rng;
use crate::tokenizer::{ItemId, ItemIndex, SemanticId};

pub use eval::{evaluate_true_value, evaluate_xtr, generate_items, EvalUser, TrueValueReport, XtrTable};
pub use ipa::{ipa_train, EpochStats, IpaConfig, IpaSample, SamplingMode, DPO_STREAM};

/// The representative item of every generated code: the lowest item id
/// sharing that code.
pub fn resolve_items(index: &ItemIndex, session: &[SemanticId]) -> Result<Vec<ItemId>> {
    session
        .iter()
        .map(|sid| {
            index.items_for(sid).iter().min().copied().ok_or_else(|| Error::Contract(format!("code {sid} names no item")))
        })
        .collect()
}

/// Semantic IDs of `items`, in order.
pub fn item_codes(index: &ItemIndex, items: &[ItemId]) -> Result<Vec<SemanticId>> {
    items
        .iter()
        .map(|&i| index.code_of(i).cloned().ok_or_else(|| Error::Contract(format!("item {i} has no semantic id"))))
        .collect()
}

/// Up to `n` distinct sessions for one history: the top-`n` beams, or `n`
/// temperature samples with duplicates removed when `temperature` is given.
pub fn sample_responses(
    policy: &GenModel,
    enc: &EncodedHistory,
    index: &ItemIndex,
    n: usize,
    temperature: Option<(f64, &mut Rng)>,
    use_kv_cache: bool,
) -> Result<Vec<Hypothesis>> {
    if n == 0 {
        return Err(Error::Argument("at least one response required".into()));
    }
    match temperature {
        None => Ok(beam_search(policy, enc, index, BeamOptions { beam_size: n, use_kv_cache })?.hypotheses),
        Some((t, rng)) => {
            let mut out: Vec<Hypothesis> = Vec::with_capacity(n);
            for _ in 0..n {
                let h = sample_session(policy, enc, index, t, rng)?;
                if !out.iter().any(|o| o.session == h.session) {
                    out.push(h);
                }
            }
            Ok(out)
        }
    }
}

/// A scored candidate: its reward and its generation log-probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub reward: f64,
    pub log_prob: f64,
}

/// Indices of the winner (highest reward; ties to higher log-prob, then
/// lower index) and loser (lowest reward; ties to lower log-prob, then
/// higher index). `None` with fewer than two candidates.
pub fn select_pair(scored: &[Scored]) -> Option<(usize, usize)> {
    if scored.len() < 2 {
        return None;
    }
    let mut w = 0;
    let mut l = scored.len() - 1;
    for (i, s) in scored.iter().enumerate() {
        let b = &scored[w];
        if s.reward > b.reward || (s.reward == b.reward && s.log_prob > b.log_prob) {
            w = i;
        }
    }
    for (i, s) in scored.iter().enumerate().rev() {
        let b = &scored[l];
        if s.reward < b.reward || (s.reward == b.reward && s.log_prob < b.log_prob) {
            l = i;
        }
    }
    Some((w, l))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    /// Encoder tokens of the history.
    pub history: Vec<usize>,
    pub winner: Vec<SemanticId>,
    pub loser: Vec<SemanticId>,
    pub winner_reward: f64,
    pub loser_reward: f64,
}

fn pair_samples(policy: &GenModel, pair: &PreferencePair) -> Result<(Sample, Sample)> {
    let layout = policy.token_layout();
    let w = Sample { history: pair.history.clone(), decoder: build_decoder_tokens(layout, &pair.winner)? };
    let l = Sample { history: pair.history.clone(), decoder: build_decoder_tokens(layout, &pair.loser)? };
    Ok((w, l))
}

/// `−log σ(β[(log π(w) − log π_ref(w)) − (log π(l) − log π_ref(l))])`,
/// differentiable in the policy only.
pub fn dpo_loss(g: &mut Graph, policy: &GenModel, reference: &GenModel, pair: &PreferencePair, beta: f64) -> Result<Var> {
    let (ws, ls) = pair_samples(policy, pair)?;
    let ref_lp = |s: &Sample| -> Result<f64> {
        let mut rg = Graph::inference();
        let v = reference.sequence_log_prob(&mut rg, s)?;
        Ok(rg.value(v).item())
    };
    let ref_margin = ref_lp(&ws)? - ref_lp(&ls)?;
    let pw = policy.sequence_log_prob(g, &ws)?;
    let pl = policy.sequence_log_prob(g, &ls)?;
    let margin = g.sub(pw, pl);
    let z = g.scale(margin, beta);
    let shift = g.constant(Tensor::scalar(-(ref_margin * beta)));
    let z = g.add(z, shift);
    let ls = g.log_sigmoid(z);
    Ok(g.scale(ls, -1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairOutcome {
    Formed,
    TooFewResponses,
    IdenticalExtremes,
}
