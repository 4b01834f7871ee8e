//! Session reward model.
//!
//! For a user history `H` (rows are item embeddings) and a session of `m`
//! items `v_1..v_m`:
//!
//! ```text
//! u    = W_u · mean(H) + b_u
//! a_i  = softmax(v_i Hᵀ / √d) H                      target attention
//! e_i  = W_e [v_i ; v_i ⊙ a_i] + b_e + (W_v v_i + b_v) ⊙ u
//! h_f  = softmax(h W_Q (h W_K)ᵀ / √d_rm) h W_V         over the m rows
//! r̂_t  = σ(MLP_t(Σ_i h_f,i))                          t ∈ swt, vtr, wtr, ltr
//! ```
//!
//! An empty history is replaced by a single zero row, so every history term
//! vanishes and `e_i` depends on `v_i` alone.

pub mod metrics;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genmodel::{linear, Linear, ParamBuilder};
use crate::numerics::{Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::SeedTree;
use crate::tokenizer::{ItemEmbedding, ItemId};

pub use metrics::{auc, average_ranks, pearson, spearman};
pub use train::{evaluate_reward_model, rm_samples, train_reward_model, RmEvaluation, RmSample, RmTrainConfig};

/// Target names in tower order.
pub const TARGETS: [&str; 4] = ["swt", "vtr", "wtr", "ltr"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Item embedding width.
    pub input_dim: usize,
    pub d_rm: usize,
    pub tower_hidden: usize,
    pub init_std: f64,
    /// Weights of (swt, vtr, wtr, ltr) in the scalar session score;
    /// normalized to sum to one.
    pub score_weights: [f64; 4],
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { input_dim: 32, d_rm: 32, tower_hidden: 16, init_std: 0.1, score_weights: [1.0; 4] }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.d_rm == 0 || self.tower_hidden == 0 {
            return Err(Error::Config("reward model dimensions must be positive".into()));
        }
        let w = &self.score_weights;
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("score weights must be non-negative with a positive sum".into()));
        }
        Ok(())
    }

    /// Identifies checkpoints written for this configuration.
    pub fn metadata(&self) -> String {
        format!("reward-model\n{}", toml::to_string(self).expect("config serializes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub swt: f64,
    pub vtr: f64,
    pub wtr: f64,
    pub ltr: f64,
}

impl RewardVector {
    pub fn from_array(a: [f64; 4]) -> Self {
        RewardVector { swt: a[0], vtr: a[1], wtr: a[2], ltr: a[3] }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.swt, self.vtr, self.wtr, self.ltr]
    }
}

#[derive(Debug, Clone)]
struct Tower {
    hidden: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    user: Linear,
    item: Linear,
    value: Linear,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    towers: Vec<Tower>,
}

#[derive(Debug, Clone)]
pub struct RewardModel {
    pub config: RewardConfig,
    pub store: ParamStore,
    layout: Layout,
}

/// Stacks the embeddings of `ids` into a `len × dim` tensor.
pub fn embedding_rows(table: &[ItemEmbedding], ids: &[ItemId]) -> Result<Tensor> {
    let dim = table.first().map_or(0, |e| e.vector.len());
    let mut data = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        let e = table
            .get(id.0 as usize)
            .filter(|e| e.id == id)
            .ok_or_else(|| Error::Contract(format!("item {id} has no embedding")))?;
        data.extend_from_slice(&e.vector);
    }
    Ok(Tensor::matrix(ids.len(), dim, data))
}

impl RewardModel {
    pub fn new(config: RewardConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedTree::new(seed).stream("reward-init");
        let mut store = ParamStore::new();
        let (d, r, h) = (config.input_dim, config.d_rm, config.tower_hidden);
        let mut b = ParamBuilder { store: &mut store, rng: &mut rng, std: config.init_std };
        let user = b.linear("user", d, r);
        let item = b.linear("item", 2 * d, r);
        let value = b.linear("item_value", d, r);
        let wq = b.randn("fuse.q".into(), r, r);
        let wk = b.randn("fuse.k".into(), r, r);
        let wv = b.randn("fuse.v".into(), r, r);
        let towers = TARGETS
            .iter()
            .map(|t| Tower { hidden: b.linear(&format!("tower.{t}.hidden"), r, h), out: b.linear(&format!("tower.{t}.out"), h, 1) })
            .collect();
        let layout = Layout { user, item, value, wq, wk, wv, towers };
        Ok(RewardModel { config, store, layout })
    }

    fn check_input(&self, history: &Tensor, session: &Tensor) -> Result<()> {
        let d = self.config.input_dim;
        if session.rows() == 0 {
            return Err(Error::Contract("session is empty".into()));
        }
        if session.cols() != d || (history.rows() > 0 && history.cols() != d) {
            return Err(Error::Dimension(format!(
                "reward model expects {d}-dimensional items, got history {:?} and session {:?}",
                history.shape(),
                session.shape()
            )));
        }
        Ok(())
    }

    /// Target-aware item representations `h`, one row per session item.
    pub fn encode(&self, g: &mut Graph, history: &Tensor, session: &Tensor) -> Result<Var> {
        self.check_input(history, session)?;
        let (s, l) = (&self.store, &self.layout);
        let d = self.config.input_dim;
        let m = session.rows();
        let hist = if history.rows() == 0 { Tensor::zeros(&[1, d]) } else { history.clone() };
        let hist = g.constant(hist);
        let v = g.constant(session.clone());

        let pooled = g.mean_rows(hist);
        let u = linear(g, s, &l.user, pooled);

        let scores = g.matmul_bt(v, hist);
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let att = g.softmax_rows(scores, None);
        let a = g.matmul(att, hist);
        let va = g.mul(v, a);
        let cat = g.concat_cols(&[v, va]);
        let e = linear(g, s, &l.item, cat);

        let ones = g.constant(Tensor::filled(&[m, 1], 1.0));
        let u_rows = g.matmul(ones, u);
        let gate = linear(g, s, &l.value, v);
        let inter = g.mul(gate, u_rows);
        Ok(g.add(e, inter))
    }

    /// Single-head self-attention across the session rows.
    pub fn fuse(&self, g: &mut Graph, h: Var) -> Var {
        let (s, l) = (&self.store, &self.layout);
        let (wq, wk, wv) = (g.param(s, l.wq), g.param(s, l.wk), g.param(s, l.wv));
        let q = g.matmul(h, wq);
        let k = g.matmul(h, wk);
        let v = g.matmul(h, wv);
        let scores = g.matmul_bt(q, k);
        let scores = g.scale(scores, 1.0 / (self.config.d_rm as f64).sqrt());
        let p = g.softmax_rows(scores, None);
        g.matmul(p, v)
    }

    /// Tower logits as a 1×4 row in target order.
    pub fn heads(&self, g: &mut Graph, fused: Var) -> Var {
        let pooled = g.sum_rows(fused);
        let outs: Vec<Var> = self
            .layout
            .towers
            .iter()
            .map(|t| {
                let h = linear(g, &self.store, &t.hidden, pooled);
                let h = g.gelu(h);
                linear(g, &self.store, &t.out, h)
            })
            .collect();
        g.concat_cols(&outs)
    }

    pub fn logits(&self, g: &mut Graph, history: &Tensor, session: &Tensor) -> Result<Var> {
        let h = self.encode(g, history, session)?;
        let f = self.fuse(g, h);
        Ok(self.heads(g, f))
    }

    /// Σ over the four targets of BCE(label, σ(logit)).
    pub fn loss(&self, g: &mut Graph, history: &Tensor, session: &Tensor, labels: &[f64; 4]) -> Result<Var> {
        let z = self.logits(g, history, session)?;
        Ok(g.bce_with_logits(z, labels))
    }

    pub fn predict(&self, history: &Tensor, session: &Tensor) -> Result<RewardVector> {
        let mut g = Graph::inference();
        let z = self.logits(&mut g, history, session)?;
        let p = g.sigmoid(z);
        let r = g.value(p).data();
        Ok(RewardVector::from_array([r[0], r[1], r[2], r[3]]))
    }

    pub fn predict_items(&self, table: &[ItemEmbedding], history: &[ItemId], session: &[ItemId]) -> Result<RewardVector> {
        self.predict(&embedding_rows(table, history)?, &embedding_rows(table, session)?)
    }

    /// Convex combination of the predicted targets under the score weights.
    pub fn combine(&self, r: &RewardVector) -> f64 {
        let w = &self.config.score_weights;
        let total: f64 = w.iter().sum();
        r.as_array().iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / total
    }

    pub fn score(&self, history: &Tensor, session: &Tensor) -> Result<f64> {
        Ok(self.combine(&self.predict(history, session)?))
    }

    pub fn score_items(&self, table: &[ItemEmbedding], history: &[ItemId], session: &[ItemId]) -> Result<f64> {
        Ok(self.combine(&self.predict_items(table, history, session)?))
    }

    /// The same architecture carrying the parameter values of `store`.
    pub fn with_params(&self, store: ParamStore) -> Result<Self> {
        self.store.check_same_layout(&store)?;
        Ok(RewardModel { config: self.config.clone(), store, layout: self.layout.clone() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_store(&self.store, self.config.metadata()).save(path)
    }

    /// Loads parameters saved for `config`; `force` skips the configuration
    /// hash comparison (layouts must still agree).
    pub fn load(path: &Path, config: RewardConfig, force: bool) -> Result<Self> {
        let mut m = RewardModel::new(config, 0)?;
        let meta = m.config.metadata();
        Checkpoint::load_into(path, &mut m.store, &meta, force)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, GradCheckOptions};
    use crate::rng::rng_from_seed;

    fn small() -> RewardConfig {
        RewardConfig { input_dim: 4, d_rm: 6, tower_hidden: 5, init_std: 0.3, score_weights: [1.0; 4] }
    }

    fn rand_rows(n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::randn(&[n, d], 1.0, &mut rng_from_seed(seed))
    }

    fn zero_param(m: &mut RewardModel, name: &str) {
        let id = m.store.id(name).unwrap();
        let shape = m.store.value(id).shape().to_vec();
        *m.store.value_mut(id) = Tensor::zeros(&shape);
    }

    fn permute_rows(t: &Tensor, order: &[usize]) -> Tensor {
        let data = order.iter().flat_map(|&i| t.row(i).to_vec()).collect();
        Tensor::matrix(t.rows(), t.cols(), data)
    }

    #[test]
    fn shapes_and_ranges() {
        let m = RewardModel::new(small(), 1).unwrap();
        let mut g = Graph::inference();
        let h = m.encode(&mut g, &rand_rows(7, 4, 2), &rand_rows(5, 4, 3)).unwrap();
        assert_eq!(g.value(h).shape(), &[5, 6]);
        let r = m.predict(&rand_rows(7, 4, 2), &rand_rows(5, 4, 3)).unwrap();
        assert!(r.as_array().iter().all(|&x| x > 0.0 && x < 1.0));
        let s = m.combine(&r);
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let m = RewardModel::new(small(), 1).unwrap();
        assert!(matches!(m.predict(&rand_rows(2, 3, 0), &rand_rows(2, 4, 0)), Err(Error::Dimension(_))));
        assert!(matches!(m.predict(&rand_rows(2, 4, 0), &rand_rows(2, 5, 0)), Err(Error::Dimension(_))));
        let table = vec![ItemEmbedding { id: ItemId(0), vector: vec![0.0; 4] }];
        assert!(matches!(m.predict_items(&table, &[], &[ItemId(3)]), Err(Error::Contract(_))));
        assert!(matches!(m.predict_items(&table, &[], &[]), Err(Error::Contract(_))));
        let bad = RewardConfig { score_weights: [0.0; 4], ..small() };
        assert!(RewardModel::new(bad, 0).is_err());
    }

    #[test]
    fn empty_history_uses_item_alone() {
        let mut m = RewardModel::new(small(), 4).unwrap();
        let session = rand_rows(3, 4, 5);
        let mut g = Graph::inference();
        let h = m.encode(&mut g, &Tensor::matrix(0, 4, vec![]), &session).unwrap();
        let got = g.value(h).clone();
        // With u = b_u and a_i = 0 the encoding is W_e[v;0] + b_e + (W_v v + b_v) ⊙ b_u.
        zero_param(&mut m, "user.b");
        let mut g = Graph::inference();
        let h2 = m.encode(&mut g, &Tensor::matrix(0, 4, vec![]), &session).unwrap();
        let w = m.store.by_name("item.w").unwrap().value.clone();
        let b = m.store.by_name("item.b").unwrap().value.clone();
        for i in 0..3 {
            for j in 0..6 {
                let expect: f64 = (0..4).map(|k| session.get(i, k) * w.get(k, j)).sum::<f64>() + b.get(0, j);
                assert!((g.value(h2).get(i, j) - expect).abs() < 1e-12);
            }
        }
        assert_eq!(got.rows(), 3);
    }

    #[test]
    fn history_order_does_not_matter() {
        let m = RewardModel::new(small(), 6).unwrap();
        let hist = rand_rows(6, 4, 7);
        let session = rand_rows(4, 4, 8);
        let a = m.predict(&hist, &session).unwrap();
        let b = m.predict(&permute_rows(&hist, &[3, 0, 5, 1, 4, 2]), &session).unwrap();
        for (x, y) in a.as_array().iter().zip(b.as_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_item_fusion_is_value_projection() {
        let m = RewardModel::new(small(), 9).unwrap();
        let mut g = Graph::inference();
        let h = m.encode(&mut g, &rand_rows(3, 4, 1), &rand_rows(1, 4, 2)).unwrap();
        let f = m.fuse(&mut g, h);
        let wv = m.store.by_name("fuse.v").unwrap().value.clone();
        let expect = crate::numerics::matmul(g.value(h), &wv).unwrap();
        assert!(g.value(f).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn zero_value_projection_fuses_to_zero() {
        let mut m = RewardModel::new(small(), 10).unwrap();
        zero_param(&mut m, "fuse.v");
        let mut g = Graph::inference();
        let h = m.encode(&mut g, &rand_rows(3, 4, 1), &rand_rows(4, 4, 2)).unwrap();
        let f = m.fuse(&mut g, h);
        assert!(g.value(f).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fusion_mixes_every_position() {
        let m = RewardModel::new(small(), 11).unwrap();
        let hist = rand_rows(3, 4, 1);
        let session = rand_rows(4, 4, 2);
        let mut changed = session.clone();
        changed.row_mut(2)[0] += 1.0;
        let fused = |s: &Tensor| {
            let mut g = Graph::inference();
            let h = m.encode(&mut g, &hist, s).unwrap();
            let f = m.fuse(&mut g, h);
            g.value(f).clone()
        };
        let (a, b) = (fused(&session), fused(&changed));
        for i in 0..4 {
            assert!(a.row(i).iter().zip(b.row(i)).any(|(x, y)| x != y), "row {i} unchanged");
        }
    }

    #[test]
    fn fused_rows_stay_in_convex_hull_with_identity_values() {
        let mut m = RewardModel::new(small(), 12).unwrap();
        let id = m.store.id("fuse.v").unwrap();
        *m.store.value_mut(id) = Tensor::identity(6);
        let mut g = Graph::inference();
        let h = m.encode(&mut g, &rand_rows(3, 4, 1), &rand_rows(5, 4, 2)).unwrap();
        let f = m.fuse(&mut g, h);
        let (hv, fv) = (g.value(h), g.value(f));
        for j in 0..6 {
            let lo = (0..5).map(|i| hv.get(i, j)).fold(f64::INFINITY, f64::min);
            let hi = (0..5).map(|i| hv.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..5 {
                assert!(fv.get(i, j) >= lo - 1e-12 && fv.get(i, j) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn zero_towers_predict_one_half() {
        let mut m = RewardModel::new(small(), 13).unwrap();
        for t in TARGETS {
            zero_param(&mut m, &format!("tower.{t}.out.w"));
        }
        let r = m.predict(&rand_rows(3, 4, 1), &rand_rows(5, 4, 2)).unwrap();
        assert_eq!(r.as_array(), [0.5; 4]);
        assert_eq!(m.combine(&r), 0.5);
        let mut g = Graph::new();
        let l = m.loss(&mut g, &rand_rows(3, 4, 1), &rand_rows(5, 4, 2), &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((g.value(l).item() - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn duplicated_session_changes_sum_pooling() {
        let m = RewardModel::new(small(), 14).unwrap();
        let hist = rand_rows(3, 4, 1);
        let s = rand_rows(2, 4, 2);
        let doubled = permute_rows(&s, &[0, 1]);
        let doubled = Tensor::matrix(4, 4, [doubled.data(), s.data()].concat());
        assert_ne!(m.predict(&hist, &s).unwrap(), m.predict(&hist, &doubled).unwrap());
    }

    #[test]
    fn score_ranking_matches_weighted_recomputation() {
        let cfg = RewardConfig { score_weights: [3.0, 1.0, 0.5, 0.5], ..small() };
        let m = RewardModel::new(cfg, 15).unwrap();
        let hist = rand_rows(4, 4, 1);
        let sessions: Vec<Tensor> = (0..8).map(|i| rand_rows(3, 4, 100 + i)).collect();
        let scores: Vec<f64> = sessions.iter().map(|s| m.score(&hist, s).unwrap()).collect();
        let manual: Vec<f64> = sessions
            .iter()
            .map(|s| {
                let r = m.predict(&hist, s).unwrap();
                (3.0 * r.swt + r.vtr + 0.5 * r.wtr + 0.5 * r.ltr) / 5.0
            })
            .collect();
        let order = |x: &[f64]| {
            let mut i: Vec<usize> = (0..8).collect();
            i.sort_by(|&a, &b| x[b].total_cmp(&x[a]));
            i
        };
        assert_eq!(order(&scores), order(&manual));
        let mut r = RewardVector::from_array([0.2, 0.3, 0.4, 0.5]);
        let before = m.combine(&r);
        r.wtr = 0.6;
        assert!(m.combine(&r) > before);
    }

    #[test]
    fn rm_loss_passes_gradient_check() {
        let cfg = RewardConfig { input_dim: 4, d_rm: 16, tower_hidden: 8, init_std: 0.3, score_weights: [1.0; 4] };
        let mut m = RewardModel::new(cfg, 16).unwrap();
        let hist = rand_rows(5, 4, 1);
        let session = rand_rows(2, 4, 2);
        let layout = m.layout.clone();
        let config = m.config.clone();
        let report = finite_diff_check(
            &mut m.store,
            |g, store| {
                let view = RewardModel { config: config.clone(), store: store.clone(), layout: layout.clone() };
                view.loss(g, &hist, &session, &[1.0, 0.0, 0.0, 1.0])
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip_and_config_guard() {
        let m = RewardModel::new(small(), 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rm.ckpt");
        m.save(&p).unwrap();
        let back = RewardModel::load(&p, small(), false).unwrap();
        assert!(back.store.values_bitwise_eq(&m.store));
        let other = RewardConfig { score_weights: [2.0, 1.0, 1.0, 1.0], ..small() };
        assert!(matches!(RewardModel::load(&p, other.clone(), false), Err(Error::Integrity { .. })));
        assert!(RewardModel::load(&p, other, true).is_ok());
    }
}
