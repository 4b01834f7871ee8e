//! Synthetic recommendation environment.
//!
//! Generative rules, with `a = p·e / √d` the affinity between a user
//! preference `p` and an item embedding `e`, and `w_*` the user's per-target
//! weights:
//!
//! ```text
//! catalog     center_c ~ N(0, I),  e = center_c + item_noise · N(0, I)
//! preference  p ~ N(0, I)
//! history     Gumbel top-n of history_temperature · a   (sampling without replacement)
//! watch       P(watch)  = σ(watch_slope · w_watch · a + watch_offset)
//! watch time  if watched: T = exp(time_log_mean + time_slope · w_time · a + time_noise · ξ),  ξ ~ N(0,1)
//! like        P(like)   = σ(like_slope · w_like · a + like_offset)        (independent of watch)
//! follow      P(follow) = σ(follow_slope · w_follow · a + follow_offset)
//! ```
//!
//! With zero offset the watch link is at its midpoint, so `a = 0` gives
//! probability 0.5. Session labels: `vtr` when at least `vtr_min_watches`
//! items are watched, `swt` when the total watch time reaches
//! `swt_threshold`, `ltr` on any like and `wtr` on any follow.
//!
//! The session value is the expectation of
//! `Σ_i value_watch·watch_i + value_time·T_i/exp(time_log_mean) + value_like·like_i + value_follow·follow_i`,
//! available in closed form because every term is linear in a per-item
//! probability or a log-normal mean.

mod io;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::sigmoid;
use crate::rng::{Rng, SeedTree};
use crate::tokenizer::{ItemEmbedding, ItemId};

pub use io::{read_catalog, read_logs, read_users, write_catalog, write_logs, write_users};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackConfig {
    pub watch_slope: f64,
    pub watch_offset: f64,
    pub time_log_mean: f64,
    pub time_slope: f64,
    pub time_noise: f64,
    pub like_slope: f64,
    pub like_offset: f64,
    pub follow_slope: f64,
    pub follow_offset: f64,
    pub vtr_min_watches: usize,
    pub swt_threshold: f64,
    pub value_watch: f64,
    pub value_time: f64,
    pub value_like: f64,
    pub value_follow: f64,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig {
            watch_slope: 1.0,
            watch_offset: 0.0,
            time_log_mean: 3.0,
            time_slope: 0.3,
            time_noise: 0.5,
            like_slope: 0.3,
            like_offset: logit(0.05),
            follow_slope: 0.3,
            follow_offset: logit(0.01),
            vtr_min_watches: 5,
            swt_threshold: 300.0,
            value_watch: 1.0,
            value_time: 1.0,
            value_like: 2.0,
            value_follow: 5.0,
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoggingPolicy {
    AffinityGreedy,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub num_items: usize,
    pub dim: usize,
    pub num_clusters: usize,
    pub item_noise: f64,
    pub num_users: usize,
    /// Extra users, with ids after the training users, kept out of training.
    pub held_out_users: usize,
    pub history_len: usize,
    pub history_temperature: f64,
    pub session_len: usize,
    pub sessions_per_user: usize,
    pub policy: LoggingPolicy,
    pub policy_temperature: f64,
    pub quality_filter: bool,
    pub feedback: FeedbackConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_items: 5000,
            dim: 32,
            num_clusters: 64,
            item_noise: 0.5,
            num_users: 2000,
            held_out_users: 500,
            history_len: 32,
            history_temperature: 3.0,
            session_len: 5,
            sessions_per_user: 10,
            policy: LoggingPolicy::AffinityGreedy,
            policy_temperature: 3.0,
            quality_filter: false,
            feedback: FeedbackConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCatalog {
    pub items: Vec<ItemEmbedding>,
    /// Mixture component of every item.
    pub clusters: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub dim: usize,
    pub seed: u64,
}

impl SyntheticCatalog {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn embedding(&self, id: ItemId) -> Result<&[f64]> {
        self.items
            .get(id.0 as usize)
            .filter(|e| e.id == id)
            .map(|e| e.vector.as_slice())
            .ok_or_else(|| Error::Contract(format!("item {id} is not in the catalog")))
    }
}

/// Per-target weights scaling how strongly affinity drives each behavior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetWeights {
    pub watch: f64,
    pub time: f64,
    pub like: f64,
    pub follow: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUser {
    pub id: u32,
    pub preference: Vec<f64>,
    pub weights: TargetWeights,
    pub history: Vec<ItemId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SessionLabels {
    pub vtr: bool,
    pub swt: bool,
    pub ltr: bool,
    pub wtr: bool,
}

impl SessionLabels {
    pub fn any(&self) -> bool {
        self.vtr || self.swt || self.ltr || self.wtr
    }

    /// Order used everywhere labels are vectorized: swt, vtr, wtr, ltr.
    pub fn as_array(&self) -> [bool; 4] {
        [self.swt, self.vtr, self.wtr, self.ltr]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    pub user: u32,
    pub history: Vec<ItemId>,
    pub session: Vec<ItemId>,
    pub labels: SessionLabels,
    /// Zero for items that were not watched.
    pub watch_times: Vec<f64>,
}

fn gaussian_vec(dim: usize, std: f64, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect()
}

pub fn generate_catalog(num_items: usize, dim: usize, num_clusters: usize, item_noise: f64, seed: u64) -> Result<SyntheticCatalog> {
    if num_clusters == 0 || num_items < num_clusters {
        return Err(Error::Argument(format!("need 1 <= clusters ({num_clusters}) <= items ({num_items})")));
    }
    if dim == 0 {
        return Err(Error::Argument("embedding dimension must be positive".into()));
    }
    let mut rng = SeedTree::new(seed).stream("catalog");
    let centers: Vec<Vec<f64>> = (0..num_clusters).map(|_| gaussian_vec(dim, 1.0, &mut rng)).collect();
    let mut items = Vec::with_capacity(num_items);
    let mut clusters = Vec::with_capacity(num_items);
    for i in 0..num_items {
        let c = rng.gen_range(0..num_clusters);
        let noise = gaussian_vec(dim, item_noise, &mut rng);
        let vector = centers[c].iter().zip(noise).map(|(a, b)| a + b).collect();
        items.push(ItemEmbedding { id: ItemId(i as u32), vector });
        clusters.push(c);
    }
    Ok(SyntheticCatalog { items, clusters, centers, dim, seed })
}

pub fn affinity(preference: &[f64], item: &[f64]) -> f64 {
    let dot: f64 = preference.iter().zip(item).map(|(a, b)| a * b).sum();
    dot / (preference.len() as f64).sqrt()
}

/// Indices of the `n` largest `temperature · score + Gumbel` keys, best first.
/// Equivalent to sequential sampling without replacement from
/// `softmax(temperature · score)`.
fn gumbel_top(scores: &[f64], temperature: f64, n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (temperature * s - (-u.ln()).ln(), i)
        })
        .collect();
    let n = n.min(keyed.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if n < keyed.len() && n > 0 {
        keyed.select_nth_unstable_by(n - 1, cmp);
    }
    keyed.truncate(n);
    keyed.sort_by(cmp);
    keyed.into_iter().map(|(_, i)| i).collect()
}

pub fn user_affinities(catalog: &SyntheticCatalog, preference: &[f64]) -> Vec<f64> {
    catalog.items.iter().map(|e| affinity(preference, &e.vector)).collect()
}

/// Users with Gaussian preferences, uniform [0.5, 1.5] target weights and a
/// history drawn without replacement from `softmax(history_temperature · a)`
/// in random order.
pub fn generate_users(
    catalog: &SyntheticCatalog,
    num_users: usize,
    history_len: usize,
    history_temperature: f64,
    seed: u64,
) -> Vec<SyntheticUser> {
    generate_users_from(catalog, 0, num_users, history_len, history_temperature, seed)
}

/// Users with ids `first..first + count`. Every user draws from a stream
/// keyed by its id, so a user is the same whichever batch produced it.
pub fn generate_users_from(
    catalog: &SyntheticCatalog,
    first: usize,
    count: usize,
    history_len: usize,
    history_temperature: f64,
    seed: u64,
) -> Vec<SyntheticUser> {
    let seeds = SeedTree::new(seed);
    (first..first + count)
        .map(|u| {
            let mut rng = seeds.child("users").stream(&u.to_string());
            let preference = gaussian_vec(catalog.dim, 1.0, &mut rng);
            generate_user_with_preference(catalog, u as u32, preference, history_len, history_temperature, &mut rng)
        })
        .collect()
}

pub fn generate_user_with_preference(
    catalog: &SyntheticCatalog,
    id: u32,
    preference: Vec<f64>,
    history_len: usize,
    history_temperature: f64,
    rng: &mut Rng,
) -> SyntheticUser {
    let mut w = || rng.gen_range(0.5f64..1.5);
    let weights = TargetWeights { watch: w(), time: w(), like: w(), follow: w() };
    let scores = user_affinities(catalog, &preference);
    let mut history: Vec<ItemId> =
        gumbel_top(&scores, history_temperature, history_len, rng).into_iter().map(|i| ItemId(i as u32)).collect();
    history.shuffle(rng);
    SyntheticUser { id, preference, weights, history }
}

/// Per-item closed-form probabilities and expected watch time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemExpectation {
    pub watch: f64,
    /// Unconditional expected watch time (zero when unwatched).
    pub time: f64,
    pub like: f64,
    pub follow: f64,
}

pub fn item_expectation(cfg: &FeedbackConfig, user: &SyntheticUser, item: &[f64]) -> ItemExpectation {
    let a = affinity(&user.preference, item);
    let w = &user.weights;
    let watch = sigmoid(cfg.watch_slope * w.watch * a + cfg.watch_offset);
    let time_mean = (cfg.time_log_mean + cfg.time_slope * w.time * a + 0.5 * cfg.time_noise * cfg.time_noise).exp();
    ItemExpectation {
        watch,
        time: watch * time_mean,
        like: sigmoid(cfg.like_slope * w.like * a + cfg.like_offset),
        follow: sigmoid(cfg.follow_slope * w.follow * a + cfg.follow_offset),
    }
}

fn item_value(cfg: &FeedbackConfig, x: &ItemExpectation) -> f64 {
    cfg.value_watch * x.watch
        + cfg.value_time * x.time / cfg.time_log_mean.exp()
        + cfg.value_like * x.like
        + cfg.value_follow * x.follow
}

/// Sampled reward components of one simulated session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionFeedback {
    pub labels: SessionLabels,
    pub watch_times: Vec<f64>,
    pub likes: Vec<bool>,
    pub follows: Vec<bool>,
}

impl SessionFeedback {
    /// The realized quantity whose expectation is [`true_session_value`].
    pub fn realized_value(&self, cfg: &FeedbackConfig) -> f64 {
        let scale = cfg.time_log_mean.exp();
        let mut v = 0.0;
        for i in 0..self.watch_times.len() {
            let t = self.watch_times[i];
            v += cfg.value_watch * f64::from(u8::from(t > 0.0))
                + cfg.value_time * t / scale
                + cfg.value_like * f64::from(u8::from(self.likes[i]))
                + cfg.value_follow * f64::from(u8::from(self.follows[i]));
        }
        v
    }
}

pub fn simulate_session_feedback(
    cfg: &FeedbackConfig,
    catalog: &SyntheticCatalog,
    user: &SyntheticUser,
    session: &[ItemId],
    rng: &mut Rng,
) -> Result<SessionFeedback> {
    let mut watch_times = Vec::with_capacity(session.len());
    let mut likes = Vec::with_capacity(session.len());
    let mut follows = Vec::with_capacity(session.len());
    for &item in session {
        let e = catalog.embedding(item)?;
        let a = affinity(&user.preference, e);
        let w = &user.weights;
        let p_watch = sigmoid(cfg.watch_slope * w.watch * a + cfg.watch_offset);
        let watched = rng.gen::<f64>() < p_watch;
        let xi: f64 = StandardNormal.sample(rng);
        let t = (cfg.time_log_mean + cfg.time_slope * w.time * a + cfg.time_noise * xi).exp();
        watch_times.push(if watched { t } else { 0.0 });
        likes.push(rng.gen::<f64>() < sigmoid(cfg.like_slope * w.like * a + cfg.like_offset));
        follows.push(rng.gen::<f64>() < sigmoid(cfg.follow_slope * w.follow * a + cfg.follow_offset));
    }
    let watched = watch_times.iter().filter(|&&t| t > 0.0).count();
    let labels = SessionLabels {
        vtr: watched >= cfg.vtr_min_watches,
        swt: watch_times.iter().sum::<f64>() >= cfg.swt_threshold,
        ltr: likes.iter().any(|&b| b),
        wtr: follows.iter().any(|&b| b),
    };
    Ok(SessionFeedback { labels, watch_times, likes, follows })
}

/// Closed-form expected session value.
pub fn true_session_value(cfg: &FeedbackConfig, catalog: &SyntheticCatalog, user: &SyntheticUser, session: &[ItemId]) -> Result<f64> {
    let mut v = 0.0;
    for &item in session {
        v += item_value(cfg, &item_expectation(cfg, user, catalog.embedding(item)?));
    }
    Ok(v)
}

/// Composes a session of `session_len` distinct items under the policy.
pub fn logging_policy_session(
    policy: LoggingPolicy,
    temperature: f64,
    catalog: &SyntheticCatalog,
    user: &SyntheticUser,
    session_len: usize,
    rng: &mut Rng,
) -> Vec<ItemId> {
    let picks = match policy {
        LoggingPolicy::AffinityGreedy => gumbel_top(&user_affinities(catalog, &user.preference), temperature, session_len, rng),
        LoggingPolicy::Random => rand::seq::index::sample(rng, catalog.len(), session_len.min(catalog.len())).into_vec(),
    };
    picks.into_iter().map(|i| ItemId(i as u32)).collect()
}

pub fn generate_training_logs(
    cfg: &SimConfig,
    catalog: &SyntheticCatalog,
    users: &[SyntheticUser],
    seed: u64,
) -> Result<Vec<InteractionLog>> {
    let seeds = SeedTree::new(seed).child("logs");
    let mut logs = Vec::new();
    for user in users {
        let mut rng = seeds.stream(&user.id.to_string());
        for _ in 0..cfg.sessions_per_user {
            let session = logging_policy_session(cfg.policy, cfg.policy_temperature, catalog, user, cfg.session_len, &mut rng);
            let fb = simulate_session_feedback(&cfg.feedback, catalog, user, &session, &mut rng)?;
            if cfg.quality_filter && !fb.labels.any() {
                continue;
            }
            logs.push(InteractionLog {
                user: user.id,
                history: user.history.clone(),
                session,
                labels: fb.labels,
                watch_times: fb.watch_times,
            });
        }
    }
    Ok(logs)
}

/// Catalog, users and logs generated from one configuration and root seed.
#[derive(Debug, Clone)]
pub struct World {
    pub config: SimConfig,
    pub catalog: SyntheticCatalog,
    pub users: Vec<SyntheticUser>,
    pub logs: Vec<InteractionLog>,
    pub held_out_users: Vec<SyntheticUser>,
    pub held_out_logs: Vec<InteractionLog>,
}

impl World {
    pub fn generate(config: &SimConfig, seed: u64) -> Result<Self> {
        let seeds = SeedTree::new(seed);
        let catalog =
            generate_catalog(config.num_items, config.dim, config.num_clusters, config.item_noise, seeds.seed_for("catalog"))?;
        let users = generate_users(
            &catalog,
            config.num_users,
            config.history_len,
            config.history_temperature,
            seeds.seed_for("users"),
        );
        let held_out_users = generate_users_from(
            &catalog,
            config.num_users,
            config.held_out_users,
            config.history_len,
            config.history_temperature,
            seeds.seed_for("users"),
        );
        let logs = generate_training_logs(config, &catalog, &users, seeds.seed_for("logs"))?;
        let held_out_logs = generate_training_logs(config, &catalog, &held_out_users, seeds.seed_for("logs"))?;
        Ok(World { config: config.clone(), catalog, users, logs, held_out_users, held_out_logs })
    }
}
