//! Pre-LN encoder-decoder transformer with sparse-MoE decoder FFNs.
//!
//! Encoder layer: `x += Attn(LN x)`, `x += FFN(LN x)`, then a final LN.
//! Decoder layer: `x += CausalAttn(LN x)`, `x += CrossAttn(LN x, enc)`,
//! `x = MoE(LN x) + x`, then a final LN and a projection to the vocabulary.
//! Positions are learned absolute embeddings. Every kernel treats rows
//! independently, so incremental decoding with a key/value cache reproduces
//! the full forward pass bit for bit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::genmodel::config::ModelConfig;
use crate::genmodel::tokens::{build_decoder_tokens, history_tokens, DecoderTokens, TokenLayout};
use crate::numerics::{Checkpoint, Graph, ParamId, ParamStore, PickSpec, Tensor, Var};
use crate::rng::{Rng, SeedTree};
use crate::tokenizer::SemanticId;

/// MAC-counter scope covering the expert FFN matmuls.
pub const EXPERT_SCOPE: &str = "expert_ffn";

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone)]
pub struct Moe {
    /// Expert embeddings `e_i`, one row per expert.
    pub gate: ParamId,
    pub experts: Vec<Ffn>,
    pub top_k: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: Norm,
    self_attn: Attention,
    ln2: Norm,
    cross_attn: Attention,
    ln3: Norm,
    moe: Moe,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    placeholder: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_ln: Norm,
    decoder: Vec<DecoderLayer>,
    dec_ln: Norm,
    out: Linear,
}

/// Builds named parameters with a shared initializer.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
    pub std: f64,
}

impl ParamBuilder<'_> {
    pub fn randn(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let t = Tensor::randn(&[rows, cols], self.std, self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(&[rows, cols]))
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear { w: self.randn(format!("{name}.w"), fan_in, fan_out), b: self.zeros(format!("{name}.b"), 1, fan_out) }
    }

    pub fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::filled(&[1, d], 1.0)),
            beta: self.zeros(format!("{name}.beta"), 1, d),
        }
    }

    pub fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    pub fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> Ffn {
        Ffn { up: self.linear(&format!("{name}.up"), d, hidden), down: self.linear(&format!("{name}.down"), hidden, d) }
    }

    pub fn moe(&mut self, name: &str, d: usize, hidden: usize, experts: usize, top_k: usize) -> Moe {
        Moe {
            gate: self.randn(format!("{name}.gate"), experts, d),
            experts: (0..experts).map(|i| self.ffn(&format!("{name}.expert{i}"), d, hidden)).collect(),
            top_k,
        }
    }
}

pub fn linear(g: &mut Graph, s: &ParamStore, p: &Linear, x: Var) -> Var {
    let w = g.param(s, p.w);
    let b = g.param(s, p.b);
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

pub fn layer_norm(g: &mut Graph, s: &ParamStore, p: &Norm, x: Var) -> Var {
    let gamma = g.param(s, p.gamma);
    let beta = g.param(s, p.beta);
    g.layer_norm(x, gamma, beta)
}

pub fn ffn(g: &mut Graph, s: &ParamStore, p: &Ffn, x: Var) -> Var {
    let h = linear(g, s, &p.up, x);
    let h = g.gelu(h);
    linear(g, s, &p.down, h)
}

/// Scaled dot-product attention over `heads` column blocks of q, k, v.
pub fn multi_head(g: &mut Graph, heads: usize, q: Var, k: Var, v: Var, keep: Option<&[bool]>) -> Var {
    let d = g.value(q).cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
        };
        let scores = g.matmul_bt(qh, kh);
        let scores = g.scale(scores, scale);
        let p = g.softmax_rows(scores, keep);
        outs.push(g.matmul(p, vh));
    }
    if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

/// Experts chosen for each token: the `top_k` highest gate scores, lowest
/// index first among equal scores.
pub fn route(scores: &Tensor, top_k: usize) -> Vec<Vec<usize>> {
    (0..scores.rows())
        .map(|t| {
            let row = scores.row(t);
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(top_k);
            idx.sort_unstable();
            idx
        })
        .collect()
}

/// `Σ_i g_i · FFN_i(h) + residual` with `g = softmax(h·Eᵀ)` kept only on the
/// routed experts. Returns the output and the routing of every row.
pub fn moe_forward(g: &mut Graph, s: &ParamStore, p: &Moe, h: Var, residual: Var) -> (Var, Vec<Vec<usize>>) {
    let e = g.param(s, p.gate);
    let scores = g.matmul_bt(h, e);
    let probs = g.softmax_rows(scores, None);
    let routing = route(g.value(probs), p.top_k);
    let mut out = residual;
    for (i, expert) in p.experts.iter().enumerate() {
        let rows: Vec<usize> = routing.iter().enumerate().filter(|(_, r)| r.contains(&i)).map(|(t, _)| t).collect();
        if rows.is_empty() {
            continue;
        }
        let hi = g.gather_rows(h, &rows);
        let prev = g.set_scope(Some(EXPERT_SCOPE));
        let y = ffn(g, s, expert, hi);
        g.set_scope(prev);
        let idx: Vec<(usize, usize)> = rows.iter().map(|&t| (t, i)).collect();
        let gate = g.pick_entries(probs, &idx);
        let y = g.mul_col(y, gate);
        out = g.scatter_add_rows(out, y, &rows);
    }
    (out, routing)
}

/// The MoE FFN on its own: `moe_forward(h, h)`.
pub fn moe_ffn(g: &mut Graph, s: &ParamStore, p: &Moe, h: Var) -> (Var, Vec<Vec<usize>>) {
    moe_forward(g, s, p, h, h)
}

/// Encoder output and per-layer cross-attention keys and values.
#[derive(Debug, Clone)]
pub struct EncodedHistory {
    pub output: Tensor,
    pub cross_k: Vec<Tensor>,
    pub cross_v: Vec<Tensor>,
}

/// Cross-attention keys/values as graph nodes.
#[derive(Debug, Clone)]
pub struct CrossKv {
    pub k: Vec<Var>,
    pub v: Vec<Var>,
}

/// Self-attention keys and values of every decoded position, per layer.
#[derive(Debug, Clone, Default)]
pub struct DecoderCache {
    k: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    len: usize,
}

impl DecoderCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Prepared (history, session) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub history: Vec<usize>,
    pub decoder: DecoderTokens,
}

#[derive(Debug, Clone)]
pub struct GenModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    layout: Layout,
}

impl GenModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedTree::new(seed).stream("genmodel-init");
        let mut store = ParamStore::new();
        let c = &config;
        let d = c.d_model;
        let mut b = ParamBuilder { store: &mut store, rng: &mut rng, std: c.init_std };
        let tok_emb = b.randn("tok_emb".into(), c.vocab_size(), d);
        let enc_pos = b.randn("enc.pos".into(), c.encoder_positions(), d);
        let dec_pos = b.randn("dec.pos".into(), c.decoder_len(), d);
        let placeholder = b.randn("enc.placeholder".into(), 1, d);
        let encoder = (0..c.encoder_layers)
            .map(|i| EncoderLayer {
                ln1: b.norm(&format!("enc.{i}.ln1"), d),
                attn: b.attention(&format!("enc.{i}.attn"), d),
                ln2: b.norm(&format!("enc.{i}.ln2"), d),
                ffn: b.ffn(&format!("enc.{i}.ffn"), d, c.ffn_hidden),
            })
            .collect();
        let enc_ln = b.norm("enc.ln", d);
        let decoder = (0..c.decoder_layers)
            .map(|i| DecoderLayer {
                ln1: b.norm(&format!("dec.{i}.ln1"), d),
                self_attn: b.attention(&format!("dec.{i}.self"), d),
                ln2: b.norm(&format!("dec.{i}.ln2"), d),
                cross_attn: b.attention(&format!("dec.{i}.cross"), d),
                ln3: b.norm(&format!("dec.{i}.ln3"), d),
                moe: b.moe(&format!("dec.{i}.moe"), d, c.expert_hidden, c.moe_experts, c.moe_top_k),
            })
            .collect();
        let dec_ln = b.norm("dec.ln", d);
        let out = b.linear("out", d, c.vocab_size());
        let layout = Layout { tok_emb, enc_pos, dec_pos, placeholder, encoder, enc_ln, decoder, dec_ln, out };
        Ok(GenModel { config, store, layout })
    }

    /// The same architecture carrying the parameter values of `store`.
    pub fn with_params(&self, store: ParamStore) -> Result<Self> {
        self.store.check_same_layout(&store)?;
        Ok(GenModel { config: self.config.clone(), store, layout: self.layout.clone() })
    }

    /// Identifies checkpoints written for this configuration.
    pub fn metadata(&self) -> String {
        format!("genmodel\n{}", toml::to_string(&self.config).expect("config serializes"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_store(&self.store, self.metadata()).save(path)
    }

    /// Loads parameters saved for `config`; `force` skips the configuration
    /// hash comparison (layouts must still agree).
    pub fn load(path: &Path, config: ModelConfig, force: bool) -> Result<Self> {
        let mut m = GenModel::new(config, 0)?;
        let meta = m.metadata();
        Checkpoint::load_into(path, &mut m.store, &meta, force)?;
        Ok(m)
    }

    pub fn token_layout(&self) -> TokenLayout {
        TokenLayout { codebook_size: self.config.codebook_size, levels: self.config.codebook_levels }
    }

    pub fn sample(&self, history: &[SemanticId], session: &[SemanticId]) -> Result<Sample> {
        if session.len() != self.config.session_size {
            return Err(Error::Contract(format!(
                "session has {} items, model expects {}",
                session.len(),
                self.config.session_size
            )));
        }
        Ok(Sample {
            history: self.history_tokens(history)?,
            decoder: build_decoder_tokens(self.token_layout(), session)?,
        })
    }

    pub fn history_tokens(&self, history: &[SemanticId]) -> Result<Vec<usize>> {
        history_tokens(self.token_layout(), history, self.config.max_history)
    }

    pub fn moe_layer(&self, layer: usize) -> &Moe {
        &self.layout.decoder[layer].moe
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let v = self.config.vocab_size();
        match tokens.iter().find(|&&t| t >= v) {
            Some(t) => Err(Error::Index(format!("token {t} outside vocabulary of {v}"))),
            None => Ok(()),
        }
    }

    /// Encoder over history tokens with padding removed; positions are
    /// assigned to the kept tokens in order. Overlong input keeps the most
    /// recent tokens. An empty history encodes one learned placeholder.
    pub fn encode(&self, g: &mut Graph, tokens: &[usize], keep: Option<&[bool]>) -> Result<Var> {
        let s = &self.store;
        let lay = &self.layout;
        let mut kept: Vec<usize> = match keep {
            Some(k) => tokens.iter().zip(k).filter(|(_, &m)| m).map(|(&t, _)| t).collect(),
            None => tokens.to_vec(),
        };
        self.check_tokens(&kept)?;
        let cap = self.config.encoder_positions();
        if kept.len() > cap {
            kept.drain(..kept.len() - cap);
        }
        let n = kept.len().max(1);
        let pos_table = g.param(s, lay.enc_pos);
        let pos = g.gather_rows(pos_table, &(0..n).collect::<Vec<_>>());
        let emb = if kept.is_empty() {
            g.param(s, lay.placeholder)
        } else {
            let table = g.param(s, lay.tok_emb);
            g.gather_rows(table, &kept)
        };
        let mut x = g.add(emb, pos);
        for layer in &lay.encoder {
            let a = layer_norm(g, s, &layer.ln1, x);
            let q = linear(g, s, &layer.attn.q, a);
            let k = linear(g, s, &layer.attn.k, a);
            let v = linear(g, s, &layer.attn.v, a);
            let att = multi_head(g, self.config.heads, q, k, v, None);
            let o = linear(g, s, &layer.attn.o, att);
            x = g.add(x, o);
            let b = layer_norm(g, s, &layer.ln2, x);
            let f = ffn(g, s, &layer.ffn, b);
            x = g.add(x, f);
        }
        Ok(layer_norm(g, s, &lay.enc_ln, x))
    }

    pub fn cross_kv(&self, g: &mut Graph, enc: Var) -> CrossKv {
        let s = &self.store;
        let (mut k, mut v) = (Vec::new(), Vec::new());
        for layer in &self.layout.decoder {
            k.push(linear(g, s, &layer.cross_attn.k, enc));
            v.push(linear(g, s, &layer.cross_attn.v, enc));
        }
        CrossKv { k, v }
    }

    /// Encodes a history once for repeated decoding.
    pub fn encode_history(&self, history: &[usize]) -> Result<EncodedHistory> {
        let mut g = Graph::inference();
        let enc = self.encode(&mut g, history, None)?;
        let kv = self.cross_kv(&mut g, enc);
        Ok(EncodedHistory {
            output: g.value(enc).clone(),
            cross_k: kv.k.iter().map(|&v| g.value(v).clone()).collect(),
            cross_v: kv.v.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    pub fn cross_from_encoded(g: &mut Graph, enc: &EncodedHistory) -> CrossKv {
        CrossKv {
            k: enc.cross_k.iter().map(|t| g.constant(t.clone())).collect(),
            v: enc.cross_v.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    /// Decoder logits for `input` placed after the positions already in
    /// `cache` (when given, it is extended with the new keys and values).
    /// Returns `[input.len() × vocab]` logits and per-layer routing.
    pub fn decode(
        &self,
        g: &mut Graph,
        cross: &CrossKv,
        input: &[usize],
        mut cache: Option<&mut DecoderCache>,
    ) -> Result<(Var, Vec<Vec<Vec<usize>>>)> {
        let s = &self.store;
        let lay = &self.layout;
        self.check_tokens(input)?;
        let start = cache.as_ref().map_or(0, |c| c.len);
        let r = input.len();
        if r == 0 || start + r > self.config.decoder_len() {
            return Err(Error::Contract(format!(
                "decoder positions {start}..{} outside 0..{}",
                start + r,
                self.config.decoder_len()
            )));
        }
        if let Some(c) = cache.as_deref_mut() {
            if c.k.is_empty() {
                c.k = vec![None; lay.decoder.len()];
                c.v = vec![None; lay.decoder.len()];
            }
        }
        let table = g.param(s, lay.tok_emb);
        let emb = g.gather_rows(table, input);
        let pos_table = g.param(s, lay.dec_pos);
        let pos = g.gather_rows(pos_table, &(start..start + r).collect::<Vec<_>>());
        let mut x = g.add(emb, pos);
        let total = start + r;
        let keep: Option<Vec<bool>> =
            (r > 1).then(|| (0..r).flat_map(|i| (0..total).map(move |j| j <= start + i)).collect());
        let mut routing = Vec::with_capacity(lay.decoder.len());
        for (l, layer) in lay.decoder.iter().enumerate() {
            let a = layer_norm(g, s, &layer.ln1, x);
            let q = linear(g, s, &layer.self_attn.q, a);
            let mut k = linear(g, s, &layer.self_attn.k, a);
            let mut v = linear(g, s, &layer.self_attn.v, a);
            if let Some(c) = cache.as_deref_mut() {
                if let (Some(pk), Some(pv)) = (&c.k[l], &c.v[l]) {
                    let (pk, pv) = (g.constant(pk.clone()), g.constant(pv.clone()));
                    k = g.concat_rows(&[pk, k]);
                    v = g.concat_rows(&[pv, v]);
                }
                c.k[l] = Some(g.value(k).clone());
                c.v[l] = Some(g.value(v).clone());
            }
            let att = multi_head(g, self.config.heads, q, k, v, keep.as_deref());
            let o = linear(g, s, &layer.self_attn.o, att);
            x = g.add(x, o);
            let b = layer_norm(g, s, &layer.ln2, x);
            let q = linear(g, s, &layer.cross_attn.q, b);
            let att = multi_head(g, self.config.heads, q, cross.k[l], cross.v[l], None);
            let o = linear(g, s, &layer.cross_attn.o, att);
            x = g.add(x, o);
            let c = layer_norm(g, s, &layer.ln3, x);
            let (y, routes) = moe_forward(g, s, &layer.moe, c, x);
            x = y;
            routing.push(routes);
        }
        if let Some(c) = cache {
            c.len = total;
        }
        let h = layer_norm(g, s, &lay.dec_ln, x);
        Ok((linear(g, s, &lay.out, h), routing))
    }

    /// Full teacher-forced forward pass.
    pub fn logits(&self, g: &mut Graph, history: &[usize], input: &[usize]) -> Result<Var> {
        let enc = self.encode(g, history, None)?;
        let cross = self.cross_kv(g, enc);
        Ok(self.decode(g, &cross, input, None)?.0)
    }

    fn slice_specs(&self, dec: &DecoderTokens, weight: f64) -> Vec<PickSpec> {
        let k = self.config.codebook_size;
        dec.target
            .iter()
            .zip(&dec.mask)
            .enumerate()
            .filter(|(_, (_, &m))| m)
            .map(|(row, (&target, _))| {
                let lo = (target / k) * k;
                PickSpec { row, lo, hi: lo + k, target, weight }
            })
            .collect()
    }

    /// Mean cross-entropy over the `m·L` semantic targets, each a softmax
    /// restricted to its level's K tokens.
    pub fn ntp_loss(&self, g: &mut Graph, sample: &Sample) -> Result<Var> {
        let count = sample.decoder.mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Argument("sample has no semantic targets".into()));
        }
        let logits = self.logits(g, &sample.history, &sample.decoder.input)?;
        let specs = self.slice_specs(&sample.decoder, -1.0 / count as f64);
        Ok(g.log_prob_pick(logits, &specs))
    }

    /// Σ log P(token) over the `m·L` semantic tokens under the level-slice
    /// softmax. This is the score beam search accumulates.
    pub fn sequence_log_prob(&self, g: &mut Graph, sample: &Sample) -> Result<Var> {
        let logits = self.logits(g, &sample.history, &sample.decoder.input)?;
        let specs = self.slice_specs(&sample.decoder, 1.0);
        Ok(g.log_prob_pick(logits, &specs))
    }

    /// Held-out style evaluation: NTP loss without recording a tape.
    pub fn eval_loss(&self, sample: &Sample) -> Result<f64> {
        let mut g = Graph::inference();
        let l = self.ntp_loss(&mut g, sample)?;
        Ok(g.value(l).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, GradCheckOptions};
    use crate::rng::rng_from_seed;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            ffn_hidden: 24,
            moe_experts: 4,
            moe_top_k: 2,
            expert_hidden: 12,
            codebook_size: 8,
            codebook_levels: 2,
            max_history: 4,
            session_size: 2,
            init_std: 0.3,
        }
    }

    fn sid(a: u32, b: u32) -> SemanticId {
        SemanticId(vec![a, b])
    }

    #[test]
    fn untrained_loss_is_near_ln_k() {
        let cfg = ModelConfig { init_std: 0.02, ..toy_config() };
        let m = GenModel::new(cfg, 1).unwrap();
        let s = m.sample(&[sid(1, 2), sid(3, 4)], &[sid(0, 1), sid(7, 7)]).unwrap();
        let loss = m.eval_loss(&s).unwrap();
        assert!((loss - 8f64.ln()).abs() < 0.05, "{loss}");
    }

    #[test]
    fn empty_history_uses_placeholder_and_shapes_hold() {
        let m = GenModel::new(toy_config(), 2).unwrap();
        let mut g = Graph::inference();
        let e = m.encode(&mut g, &[], None).unwrap();
        assert_eq!(g.value(e).shape(), &[1, 16]);
        let e = m.encode(&mut g, &[1, 9, 3], None).unwrap();
        assert_eq!(g.value(e).shape(), &[3, 16]);
        // overlong input keeps the most recent positions
        let long: Vec<usize> = (0..20).map(|i| i % 16).collect();
        let e = m.encode(&mut g, &long, None).unwrap();
        assert_eq!(g.value(e).rows(), 8);
    }

    #[test]
    fn padding_is_invisible() {
        let m = GenModel::new(toy_config(), 3).unwrap();
        let mut g = Graph::inference();
        let a = m.encode(&mut g, &[1, 9, 3, 0, 0], Some(&[true, true, true, false, false])).unwrap();
        let b = m.encode(&mut g, &[1, 9, 3, 5, 12], Some(&[true, true, true, false, false])).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn decoder_is_causal_and_reads_history() {
        let m = GenModel::new(toy_config(), 4).unwrap();
        let mut g = Graph::inference();
        let h = [1, 9, 3, 12];
        let a = m.logits(&mut g, &h, &[16, 2, 10, 16, 5, 13]).unwrap();
        let b = m.logits(&mut g, &h, &[16, 2, 10, 16, 7, 8]).unwrap();
        for t in 0..4 {
            assert_eq!(g.value(a).row(t), g.value(b).row(t));
        }
        assert_ne!(g.value(a).row(4), g.value(b).row(4));
        let c = m.logits(&mut g, &[2, 8], &[16, 2, 10, 16, 5, 13]).unwrap();
        assert_ne!(g.value(a).row(0), g.value(c).row(0));
    }

    #[test]
    fn kv_cache_matches_full_forward_bitwise() {
        let m = GenModel::new(toy_config(), 5).unwrap();
        let enc = m.encode_history(&[3, 11, 6]).unwrap();
        let input = [16, 2, 10, 16, 5, 13];
        let mut g = Graph::inference();
        let cross = GenModel::cross_from_encoded(&mut g, &enc);
        let full = m.decode(&mut g, &cross, &input, None).unwrap().0;
        let full = g.value(full).clone();
        let mut cache = DecoderCache::default();
        for (t, &tok) in input.iter().enumerate() {
            let mut g = Graph::inference();
            let cross = GenModel::cross_from_encoded(&mut g, &enc);
            let row = m.decode(&mut g, &cross, &[tok], Some(&mut cache)).unwrap().0;
            let got: Vec<u64> = g.value(row).row(0).iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = full.row(t).iter().map(|v| v.to_bits()).collect();
            assert_eq!(got, want, "position {t}");
        }
        assert_eq!(cache.len(), 6);
    }

    #[test]
    fn moe_gates_are_sparse_and_singleton_is_dense() {
        let m = GenModel::new(toy_config(), 6).unwrap();
        let mut g = Graph::inference();
        let h = g.constant(Tensor::randn(&[5, 16], 1.0, &mut rng_from_seed(1)));
        let (_, routing) = moe_ffn(&mut g, &m.store, m.moe_layer(0), h);
        assert!(routing.iter().all(|r| r.len() == 2));

        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(2);
        let p = ParamBuilder { store: &mut store, rng: &mut rng, std: 0.5 }.moe("m", 4, 6, 1, 1);
        let mut g = Graph::inference();
        let hv = Tensor::randn(&[3, 4], 1.0, &mut rng_from_seed(3));
        let h = g.constant(hv.clone());
        let (out, _) = moe_ffn(&mut g, &store, &p, h);
        let f = ffn(&mut g, &store, &p.experts[0], h);
        let want = g.add(f, h);
        assert!(g.value(out).max_abs_diff(g.value(want)) < 1e-15);
    }

    #[test]
    fn moe_with_all_experts_is_the_softmax_mixture() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(7);
        let p = ParamBuilder { store: &mut store, rng: &mut rng, std: 0.5 }.moe("m", 4, 6, 3, 3);
        let hv = Tensor::randn(&[2, 4], 1.0, &mut rng_from_seed(8));
        let mut g = Graph::inference();
        let h = g.constant(hv.clone());
        let (out, _) = moe_ffn(&mut g, &store, &p, h);
        let e = store.value(p.gate);
        for t in 0..2 {
            let logits: Vec<f64> = (0..3).map(|i| crate::numerics::kernels::dot(hv.row(t), e.row(i))).collect();
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            let mut want = hv.row(t).to_vec();
            for i in 0..3 {
                let row = g.constant(Tensor::matrix(1, 4, hv.row(t).to_vec()));
                let f = ffn(&mut g, &store, &p.experts[i], row);
                for (w, y) in want.iter_mut().zip(g.value(f).data()) {
                    *w += logits[i].exp() / z * y;
                }
            }
            for (a, b) in g.value(out).row(t).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn routing_ties_pick_lowest_index() {
        let scores = Tensor::matrix(2, 4, vec![0.25, 0.25, 0.25, 0.25, 0.1, 0.3, 0.3, 0.3]);
        assert_eq!(route(&scores, 2), vec![vec![0, 1], vec![1, 2]]);
    }

    #[test]
    fn expert_cost_scales_with_top_k() {
        let hv = Tensor::randn(&[7, 8], 1.0, &mut rng_from_seed(9));
        let cost = |k: usize| {
            let mut store = ParamStore::new();
            let mut rng = rng_from_seed(10);
            let p = ParamBuilder { store: &mut store, rng: &mut rng, std: 0.3 }.moe("m", 8, 5, 4, k);
            let mut g = Graph::inference();
            let h = g.constant(hv.clone());
            moe_ffn(&mut g, &store, &p, h);
            g.macs().scope(EXPERT_SCOPE)
        };
        assert_eq!(cost(1) * 4, cost(4));
        assert_eq!(cost(2), 7 * 2 * 2 * 8 * 5);
    }

    #[test]
    fn ntp_gradient_matches_finite_differences() {
        let mut m = GenModel::new(toy_config(), 11).unwrap();
        let s = m.sample(&[sid(1, 2), sid(3, 4), sid(6, 0)], &[sid(0, 1), sid(7, 5)]).unwrap();
        let cfg = m.config.clone();
        let layout = m.layout.clone();
        let report = finite_diff_check(
            &mut m.store,
            |g, store| {
                let view = GenModel { config: cfg.clone(), store: store.clone(), layout: layout.clone() };
                view.ntp_loss(g, &s)
            },
            GradCheckOptions { max_coords_per_param: Some(6), ..GradCheckOptions::default() },
        )
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }
}
