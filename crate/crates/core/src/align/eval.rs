use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::resolve_items;
use crate::error::{Error, Result};
use crate::genmodel::{beam_search, BeamOptions, GenModel};
use crate::reward::RewardModel;
use crate::simulator::{true_session_value, FeedbackConfig, SyntheticCatalog, SyntheticUser};
use crate::tokenizer::{ItemEmbedding, ItemId, ItemIndex};

/// A user to generate for: the simulator user (history, preference and
/// target weights) and the encoder tokens of that history.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalUser {
    pub user: SyntheticUser,
    pub tokens: Vec<usize>,
}

/// The top-`n` beam sessions as item lists with their log-probabilities.
pub fn generate_items(
    policy: &GenModel,
    index: &ItemIndex,
    tokens: &[usize],
    n: usize,
    use_kv_cache: bool,
) -> Result<Vec<(Vec<ItemId>, f64)>> {
    let enc = policy.encode_history(tokens)?;
    let beams = beam_search(policy, &enc, index, BeamOptions { beam_size: n, use_kv_cache })?;
    beams.hypotheses.iter().map(|h| Ok((resolve_items(index, &h.session)?, h.log_prob))).collect()
}

/// Mean and max reward-model predictions per target (swt, vtr, wtr, ltr).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XtrTable {
    pub users: usize,
    pub top_n: usize,
    /// Mean over every (user, session) prediction.
    pub mean: [f64; 4],
    /// Mean over users of the best of their sessions.
    pub max: [f64; 4],
}

pub fn evaluate_xtr(
    policy: &GenModel,
    rm: &RewardModel,
    table: &[ItemEmbedding],
    index: &ItemIndex,
    users: &[EvalUser],
    top_n: usize,
    use_kv_cache: bool,
) -> Result<XtrTable> {
    if users.is_empty() || top_n == 0 {
        return Err(Error::Argument("evaluation needs users and top_n > 0".into()));
    }
    let per_user: Vec<([f64; 4], [f64; 4], usize)> = users
        .par_iter()
        .map(|u| {
            let sessions = generate_items(policy, index, &u.tokens, top_n, use_kv_cache)?;
            let (mut sum, mut max) = ([0.0; 4], [f64::NEG_INFINITY; 4]);
            for (items, _) in &sessions {
                let r = rm.predict_items(table, &u.user.history, items)?.as_array();
                for t in 0..4 {
                    sum[t] += r[t];
                    max[t] = max[t].max(r[t]);
                }
            }
            Ok((sum, max, sessions.len()))
        })
        .collect::<Result<_>>()?;
    let total: usize = per_user.iter().map(|p| p.2).sum();
    let scored: Vec<_> = per_user.iter().filter(|p| p.2 > 0).collect();
    if scored.is_empty() {
        return Err(Error::Contract("no sessions could be generated".into()));
    }
    let mean = std::array::from_fn(|t| per_user.iter().map(|p| p.0[t]).sum::<f64>() / total as f64);
    let max = std::array::from_fn(|t| scored.iter().map(|p| p.1[t]).sum::<f64>() / scored.len() as f64);
    Ok(XtrTable { users: users.len(), top_n, mean, max })
}

/// Ground-truth value of generated sessions under the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueValueReport {
    pub users: usize,
    /// Mean true value of each user's top beam.
    pub mean_top1: f64,
    /// Mean true value over all returned beams.
    pub mean_top_n: f64,
}

pub fn evaluate_true_value(
    policy: &GenModel,
    index: &ItemIndex,
    feedback: &FeedbackConfig,
    catalog: &SyntheticCatalog,
    users: &[EvalUser],
    top_n: usize,
    use_kv_cache: bool,
) -> Result<TrueValueReport> {
    if users.is_empty() || top_n == 0 {
        return Err(Error::Argument("evaluation needs users and top_n > 0".into()));
    }
    let vals: Vec<(f64, f64, usize)> = users
        .par_iter()
        .map(|u| {
            let sessions = generate_items(policy, index, &u.tokens, top_n, use_kv_cache)?;
            let mut values = Vec::with_capacity(sessions.len());
            for (items, _) in &sessions {
                values.push(true_session_value(feedback, catalog, &u.user, items)?);
            }
            let first = values.first().copied().ok_or_else(|| Error::Contract("no session generated".into()))?;
            Ok((first, values.iter().sum(), values.len()))
        })
        .collect::<Result<_>>()?;
    let n = vals.len() as f64;
    let count: usize = vals.iter().map(|v| v.2).sum();
    Ok(TrueValueReport {
        users: users.len(),
        mean_top1: vals.iter().map(|v| v.0).sum::<f64>() / n,
        mean_top_n: vals.iter().map(|v| v.1).sum::<f64>() / count as f64,
    })
}
