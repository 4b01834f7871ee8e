//! Trie-constrained generation: beam search, temperature sampling and the
//! per-level prediction entropy report.
//!
//! Scores are sums of level-slice log-softmax values. Codes the item trie
//! rules out are never proposed, but they still count in the slice's
//! normalizer, so a generated session scores exactly what
//! [`GenModel::sequence_log_prob`] assigns it.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::genmodel::model::{DecoderCache, EncodedHistory, GenModel};
use crate::numerics::{kernels, Graph};
use crate::rng::Rng;
use crate::tokenizer::{ItemIndex, SemanticId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamOptions {
    pub beam_size: usize,
    pub use_kv_cache: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub session: Vec<SemanticId>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    /// Finished sessions, best first.
    pub hypotheses: Vec<Hypothesis>,
    /// Set when the trie left fewer than `beam_size` complete sessions.
    pub short: bool,
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<usize>,
    prefix: Vec<u32>,
    items: Vec<SemanticId>,
    log_prob: f64,
    cache: Option<DecoderCache>,
}

/// Logits of the next position after `tokens`.
fn next_logits(model: &GenModel, enc: &EncodedHistory, tokens: &[usize], cache: Option<&mut DecoderCache>) -> Result<Vec<f64>> {
    let mut g = Graph::inference();
    let cross = GenModel::cross_from_encoded(&mut g, enc);
    let (logits, _) = match cache {
        Some(c) => {
            let fresh = tokens[c.len()..].to_vec();
            model.decode(&mut g, &cross, &fresh, Some(c))?
        }
        None => model.decode(&mut g, &cross, tokens, None)?,
    };
    let t = g.value(logits);
    Ok(t.row(t.rows() - 1).to_vec())
}

/// Log-softmax of the `level` slice of a logits row.
fn level_log_probs(model: &GenModel, logits: &[f64], level: usize) -> Vec<f64> {
    let k = model.config.codebook_size;
    let slice = &logits[level * k..(level + 1) * k];
    let lse = kernels::logsumexp(slice);
    slice.iter().map(|v| v - lse).collect()
}

fn extend(model: &GenModel, beam: &Beam, level: usize, code: u32, log_prob: f64) -> Beam {
    let lay = model.token_layout();
    let mut next = beam.clone();
    next.tokens.push(lay.token(level, code));
    next.prefix.push(code);
    next.log_prob = log_prob;
    if level + 1 == lay.levels {
        next.items.push(crate::tokenizer::SemanticId(std::mem::take(&mut next.prefix)));
        if next.items.len() < model.config.session_size {
            next.tokens.push(lay.bos());
        }
    }
    next
}

pub fn beam_search(model: &GenModel, enc: &EncodedHistory, index: &ItemIndex, opts: BeamOptions) -> Result<BeamResult> {
    if opts.beam_size == 0 {
        return Err(Error::Argument("beam size must be positive".into()));
    }
    if index.levels() != model.config.codebook_levels {
        return Err(Error::Contract("item index depth differs from the model's codebook levels".into()));
    }
    let lay = model.token_layout();
    let mut beams = vec![Beam {
        tokens: vec![lay.bos()],
        prefix: Vec::new(),
        items: Vec::new(),
        log_prob: 0.0,
        cache: opts.use_kv_cache.then(DecoderCache::default),
    }];
    for _item in 0..model.config.session_size {
        for level in 0..lay.levels {
            let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
            for (b, beam) in beams.iter_mut().enumerate() {
                let Some(allowed) = index.next_codes(&beam.prefix) else { continue };
                let logits = next_logits(model, enc, &beam.tokens, beam.cache.as_mut())?;
                let lp = level_log_probs(model, &logits, level);
                for &c in allowed {
                    candidates.push((beam.log_prob + lp[c as usize], b, c));
                }
            }
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            candidates.truncate(opts.beam_size);
            if candidates.is_empty() {
                return Ok(BeamResult { hypotheses: Vec::new(), short: true });
            }
            beams = candidates.iter().map(|&(score, b, c)| extend(model, &beams[b], level, c, score)).collect();
        }
    }
    let short = beams.len() < opts.beam_size;
    let hypotheses = beams.into_iter().map(|b| Hypothesis { session: b.items, log_prob: b.log_prob }).collect();
    Ok(BeamResult { hypotheses, short })
}

/// Ancestral sampling with temperature over the trie-allowed codes. The
/// returned log-probability is the model's (temperature-free) score.
pub fn sample_session(model: &GenModel, enc: &EncodedHistory, index: &ItemIndex, temperature: f64, rng: &mut Rng) -> Result<Hypothesis> {
    if !(temperature > 0.0) {
        return Err(Error::Argument("sampling temperature must be positive".into()));
    }
    let lay = model.token_layout();
    let mut beam = Beam { tokens: vec![lay.bos()], prefix: Vec::new(), items: Vec::new(), log_prob: 0.0, cache: Some(DecoderCache::default()) };
    for _item in 0..model.config.session_size {
        for level in 0..lay.levels {
            let allowed = index
                .next_codes(&beam.prefix)
                .ok_or_else(|| Error::Contract("item index has no continuation".into()))?;
            let logits = next_logits(model, enc, &beam.tokens, beam.cache.as_mut())?;
            let lp = level_log_probs(model, &logits, level);
            let codes: Vec<u32> = allowed.iter().copied().collect();
            let mut w: Vec<f64> = codes.iter().map(|&c| lp[c as usize] / temperature).collect();
            let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            w.iter_mut().for_each(|v| *v = (*v - max).exp());
            let total: f64 = w.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            let mut pick = codes.len() - 1;
            for (i, &wi) in w.iter().enumerate() {
                if u < wi {
                    pick = i;
                    break;
                }
                u -= wi;
            }
            let c = codes[pick];
            beam = extend(model, &beam, level, c, beam.log_prob + lp[c as usize]);
        }
    }
    Ok(Hypothesis { session: beam.items, log_prob: beam.log_prob })
}

/// Shannon entropy (nats) of the level-slice softmax at each level of the
/// first generated item, following the greedy trie-constrained path.
pub fn first_item_entropy(model: &GenModel, enc: &EncodedHistory, index: &ItemIndex) -> Result<Vec<f64>> {
    let lay = model.token_layout();
    let mut cache = DecoderCache::default();
    let mut tokens = vec![lay.bos()];
    let mut prefix = Vec::new();
    let mut out = Vec::with_capacity(lay.levels);
    for level in 0..lay.levels {
        let logits = next_logits(model, enc, &tokens, Some(&mut cache))?;
        let lp = level_log_probs(model, &logits, level);
        out.push(-lp.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l }).sum::<f64>());
        let allowed = index.next_codes(&prefix).ok_or_else(|| Error::Contract("item index has no continuation".into()))?;
        let best = allowed
            .iter()
            .copied()
            .max_by(|&a, &b| lp[a as usize].total_cmp(&lp[b as usize]).then(b.cmp(&a)))
            .expect("trie nodes have children");
        tokens.push(lay.token(level, best));
        prefix.push(best);
    }
    Ok(out)
}

/// Mean per-level entropy over several encoded histories.
pub fn entropy_report(model: &GenModel, encoded: &[EncodedHistory], index: &ItemIndex) -> Result<Vec<f64>> {
    if encoded.is_empty() {
        return Err(Error::Argument("entropy report needs at least one user".into()));
    }
    let mut sum = vec![0.0; model.config.codebook_levels];
    for enc in encoded {
        for (s, e) in sum.iter_mut().zip(first_item_entropy(model, enc, index)?) {
            *s += e;
        }
    }
    Ok(sum.into_iter().map(|s| s / encoded.len() as f64).collect())
}
