//! Glue between the simulator's item-level records and the token-level
//! models.

use serde::{Deserialize, Serialize};

use crate::align::{item_codes, EvalUser, IpaSample};
use crate::error::Result;
use crate::genmodel::{GenModel, Sample};
use crate::simulator::{InteractionLog, SyntheticCatalog, SyntheticUser};
use crate::tokenizer::{fit_residual_stack, CodebookStack, FitOptions, ItemIndex, LevelStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Codebook size K.
    pub codebook_size: usize,
    /// Levels L.
    pub levels: usize,
    pub max_iters: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { codebook_size: 64, levels: 3, max_iters: 30 }
    }
}

pub struct Tokenized {
    pub stack: CodebookStack,
    pub stats: Vec<LevelStats>,
    pub index: ItemIndex,
}

pub fn fit_tokenizer(catalog: &SyntheticCatalog, cfg: &TokenizerConfig, seed: u64) -> Result<Tokenized> {
    let opts = FitOptions { k: cfg.codebook_size, levels: cfg.levels, max_iters: cfg.max_iters, seed };
    let (stack, stats) = fit_residual_stack(&catalog.items, opts)?;
    let index = ItemIndex::build(&catalog.items, &stack)?;
    Ok(Tokenized { stack, stats, index })
}

pub fn log_samples(model: &GenModel, index: &ItemIndex, logs: &[InteractionLog]) -> Result<Vec<Sample>> {
    logs.iter().map(|l| model.sample(&item_codes(index, &l.history)?, &item_codes(index, &l.session)?)).collect()
}

pub fn ipa_samples(model: &GenModel, index: &ItemIndex, logs: &[InteractionLog]) -> Result<Vec<IpaSample>> {
    logs.iter()
        .map(|l| {
            Ok(IpaSample {
                sample: model.sample(&item_codes(index, &l.history)?, &item_codes(index, &l.session)?)?,
                history_items: l.history.clone(),
            })
        })
        .collect()
}

pub fn eval_users(model: &GenModel, index: &ItemIndex, users: &[SyntheticUser]) -> Result<Vec<EvalUser>> {
    users
        .iter()
        .map(|u| Ok(EvalUser { user: u.clone(), tokens: model.history_tokens(&item_codes(index, &u.history)?)? }))
        .collect()
}
