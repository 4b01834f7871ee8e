//! One function per CLI command. Each reads only its declared input files
//! from the run directory and writes its outputs next to them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::RunConfig;
use super::pipeline::{eval_users, fit_tokenizer, ipa_samples, log_samples};
use crate::align::{evaluate_true_value, evaluate_xtr, generate_items, ipa_train, EpochStats, EvalUser, IpaConfig};
use crate::error::{Error, Result};
use crate::genmodel::{entropy_report, mean_eval_loss, train_seed_model, GenModel, ModelConfig, Sample, TrainConfig};
use crate::reward::{evaluate_reward_model, rm_samples, train_reward_model, RewardModel, TARGETS};
use crate::simulator::{
    read_catalog, read_logs, read_users, true_session_value, write_catalog, write_logs, write_users, InteractionLog,
    SyntheticCatalog, SyntheticUser, World,
};
use crate::tokenizer::{CodebookStack, ItemId, ItemIndex};

pub const CONFIG: &str = "config.toml";
pub const CATALOG: &str = "catalog.tsv";
pub const USERS: &str = "users.tsv";
pub const LOGS: &str = "logs.tsv";
pub const HELD_OUT_USERS: &str = "held_out_users.tsv";
pub const HELD_OUT_LOGS: &str = "held_out_logs.tsv";
pub const CODEBOOKS: &str = "codebooks.bin";
pub const SEMANTIC_IDS: &str = "semantic_ids.tsv";
pub const TOKENIZER_REPORT: &str = "tokenizer_report.tsv";
pub const SEED_CKPT: &str = "seed.ckpt";
pub const SEED_LOSS: &str = "seed_loss.csv";
pub const RM_CKPT: &str = "rm.ckpt";
pub const RM_LOSS: &str = "rm_loss.csv";
pub const RM_REPORT: &str = "rm_report.tsv";
pub const ALIGNED_CKPT: &str = "aligned.ckpt";
pub const IPA_EPOCHS: &str = "ipa_epochs.csv";
pub const PAIRS: &str = "pairs.tsv";
pub const XTR_TABLE: &str = "xtr_table.tsv";
pub const TRUE_VALUE: &str = "true_value.tsv";
pub const ENTROPY: &str = "entropy.csv";
pub const SCALING: &str = "scaling.csv";
pub const RDPO: &str = "rdpo.csv";
pub const GENERATIONS: &str = "generations.tsv";
pub const SCORED: &str = "scored.tsv";
pub const TIMINGS: &str = "timings.tsv";

/// A resolved run: output directory, configuration and flags.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub out: PathBuf,
    pub config: RunConfig,
    pub force: bool,
}

impl RunContext {
    /// Configuration precedence: `--config` file, else the run directory's
    /// `config.toml`, else defaults; `seed` overrides the root seed. The
    /// resolved configuration is written back to the run directory and must
    /// match an existing one unless `force` is set.
    pub fn resolve(out: &Path, config: Option<&Path>, seed: Option<u64>, force: bool) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let existing = out.join(CONFIG);
        let mut cfg = match config {
            Some(p) => RunConfig::load(p)?,
            None if existing.exists() => RunConfig::load(&existing)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        if existing.exists() && !force {
            let prev = RunConfig::load(&existing)?;
            if prev != cfg {
                return Err(Error::Integrity {
                    path: existing,
                    message: "run directory was produced with a different configuration (use --force to overwrite)".into(),
                });
            }
        }
        write_text(&existing, &cfg.to_toml())?;
        Ok(RunContext { out: out.to_path_buf(), config: cfg, force })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Path of a prerequisite artifact; a missing file is reported by name.
    pub fn input(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    }

    /// Checkpoint path for `--model`: `seed`, `aligned`, or a file path.
    pub fn model_path(&self, name: &str) -> Result<PathBuf> {
        match name {
            "seed" => self.input(SEED_CKPT),
            "aligned" => self.input(ALIGNED_CKPT),
            other => {
                let p = PathBuf::from(other);
                if p.exists() {
                    Ok(p)
                } else {
                    Err(Error::MissingArtifact(p))
                }
            }
        }
    }

    fn catalog(&self) -> Result<SyntheticCatalog> {
        read_catalog(&self.input(CATALOG)?)
    }

    fn index(&self, catalog: &SyntheticCatalog) -> Result<ItemIndex> {
        let stack = CodebookStack::load(&self.input(CODEBOOKS)?)?;
        ItemIndex::build(&catalog.items, &stack)
    }

    fn load_model(&self, name: &str) -> Result<GenModel> {
        GenModel::load(&self.model_path(name)?, self.config.model.clone(), self.force)
    }

    fn load_rm(&self) -> Result<RewardModel> {
        RewardModel::load(&self.input(RM_CKPT)?, self.config.reward.clone(), self.force)
    }

    fn eval_user_set(&self, model: &GenModel, index: &ItemIndex) -> Result<Vec<EvalUser>> {
        let users = read_users(&self.input(HELD_OUT_USERS)?)?;
        let n = match self.config.eval.users {
            0 => users.len(),
            n => n.min(users.len()),
        };
        if n == 0 {
            return Err(Error::Argument("evaluation set is empty".into()));
        }
        eval_users(model, index, &users[..n])
    }

    fn record_timing(&self, command: &str, started: Instant) -> Result<()> {
        let p = self.path(TIMINGS);
        let mut rows = read_keyed(&p, "command\tseconds")?;
        rows.insert(command.to_string(), format!("{command}\t{:.3}", started.elapsed().as_secs_f64()));
        write_keyed(&p, "command\tseconds", &rows)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rows of a tab-separated file keyed by their first field.
fn read_keyed(path: &Path, header: &str) -> Result<std::collections::BTreeMap<String, String>> {
    let mut rows = std::collections::BTreeMap::new();
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(header) {
            return Err(Error::parse(path.display().to_string(), "unexpected header"));
        }
        for l in lines.filter(|l| !l.is_empty()) {
            rows.insert(l.split('\t').next().unwrap_or("").to_string(), l.to_string());
        }
    }
    Ok(rows)
}

fn write_keyed(path: &Path, header: &str, rows: &std::collections::BTreeMap<String, String>) -> Result<()> {
    let mut s = format!("{header}\n");
    for r in rows.values() {
        s.push_str(r);
        s.push('\n');
    }
    write_text(path, &s)
}

fn held_out_eval(samples: &[Sample], n: usize) -> &[Sample] {
    if n == 0 {
        samples
    } else {
        &samples[..n.min(samples.len())]
    }
}

fn join<T: std::fmt::Display>(xs: impl IntoIterator<Item = T>, sep: &str) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

pub fn simulate(ctx: &RunContext) -> Result<String> {
    let t = Instant::now();
    let w = World::generate(&ctx.config.simulator, ctx.config.seed)?;
    write_catalog(&ctx.path(CATALOG), &w.catalog)?;
    write_users(&ctx.path(USERS), &w.users)?;
    write_logs(&ctx.path(LOGS), &w.logs)?;
    write_users(&ctx.path(HELD_OUT_USERS), &w.held_out_users)?;
    write_logs(&ctx.path(HELD_OUT_LOGS), &w.held_out_logs)?;
    let n = w.logs.len().max(1) as f64;
    let rate = |i: usize| w.logs.iter().filter(|l| l.labels.as_array()[i]).count() as f64 / n;
    ctx.record_timing("simulate", t)?;
    Ok(format!(
        "items {} users {} (+{} held out) logs {} | label rates swt {:.3} vtr {:.3} wtr {:.3} ltr {:.3}",
        w.catalog.len(),
        w.users.len(),
        w.held_out_users.len(),
        w.logs.len(),
        rate(0),
        rate(1),
        rate(2),
        rate(3)
    ))
}

pub fn fit_tokenizer_cmd(ctx: &RunContext) -> Result<String> {
    let t = Instant::now();
    let catalog = ctx.catalog()?;
    let tok = fit_tokenizer(&catalog, &ctx.config.tokenizer, ctx.config.seed)?;
    tok.stack.save(&ctx.path(CODEBOOKS))?;
    let mut ids = String::from("item_id\tsemantic_id\n");
    for (item, sid) in tok.index.item_codes() {
        writeln!(ids, "{item}\t{sid}").expect("string write");
    }
    write_text(&ctx.path(SEMANTIC_IDS), &ids)?;
    let mut rep = String::from("level\tmean_sq_residual_in\tmean_sq_residual_out\titerations\tconverged\tmin_cluster\tmax_cluster\n");
    for s in &tok.stats {
        writeln!(
            rep,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.level + 1,
            s.mean_sq_residual_in,
            s.mean_sq_residual_out,
            s.iterations,
            s.converged,
            s.min_cluster,
            s.max_cluster
        )
        .expect("string write");
    }
    write_text(&ctx.path(TOKENIZER_REPORT), &rep)?;
    ctx.record_timing("fit-tokenizer", t)?;
    let distinct = tok.index.full_codes().count();
    Ok(format!(
        "K={} L={} | distinct codes {} for {} items | cluster sizes {}",
        ctx.config.tokenizer.codebook_size,
        ctx.config.tokenizer.levels,
        distinct,
        catalog.len(),
        join(tok.stats.iter().map(|s| format!("{}..{}", s.min_cluster, s.max_cluster)), ", ")
    ))
}

pub fn train_seed(ctx: &RunContext, mut progress: impl FnMut(usize, f64)) -> Result<String> {
    let t = Instant::now();
    let catalog = ctx.catalog()?;
    let index = ctx.index(&catalog)?;
    let logs = read_logs(&ctx.input(LOGS)?)?;
    let held = read_logs(&ctx.input(HELD_OUT_LOGS)?)?;
    let mut model = GenModel::new(ctx.config.model.clone(), ctx.config.seed)?;
    let train = log_samples(&model, &index, &logs)?;
    let held = log_samples(&model, &index, &held)?;
    let st = &ctx.config.seed_train;
    let report =
        train_seed_model(&mut model, &train, held_out_eval(&held, st.eval_sessions), &st.train_config(), ctx.config.seed, |s, l| {
            progress(s, l)
        })?;
    model.save(&ctx.path(SEED_CKPT))?;
    let evals: HashMap<usize, f64> = report.eval_loss.iter().copied().collect();
    let mut csv = String::from("step,train_loss,eval_loss\n");
    for &(step, loss) in &report.train_loss {
        let e = evals.get(&step).map(|v| v.to_string()).unwrap_or_default();
        writeln!(csv, "{step},{loss},{e}").expect("string write");
    }
    write_text(&ctx.path(SEED_LOSS), &csv)?;
    ctx.record_timing("train-seed", t)?;
    let last = report.eval_loss.last().map_or(f64::NAN, |e| e.1);
    Ok(format!(
        "steps {} | held-out NTP loss {:.4} (ln K = {:.4})",
        report.steps_run,
        last,
        (ctx.config.model.codebook_size as f64).ln()
    ))
}

fn user_map(users: &[SyntheticUser]) -> HashMap<u32, &SyntheticUser> {
    users.iter().map(|u| (u.id, u)).collect()
}

pub fn held_out_true_values(catalog: &SyntheticCatalog, cfg: &RunConfig, users: &[SyntheticUser], logs: &[InteractionLog]) -> Result<Vec<f64>> {
    let by_id = user_map(users);
    logs.iter()
        .map(|l| {
            let u = by_id.get(&l.user).ok_or_else(|| Error::Contract(format!("log names unknown user {}", l.user)))?;
            true_session_value(&cfg.simulator.feedback, catalog, u, &l.session)
        })
        .collect()
}

pub fn train_rm(ctx: &RunContext) -> Result<String> {
    let t = Instant::now();
    let catalog = ctx.catalog()?;
    let logs = read_logs(&ctx.input(LOGS)?)?;
    let held_logs = read_logs(&ctx.input(HELD_OUT_LOGS)?)?;
    let held_users = read_users(&ctx.input(HELD_OUT_USERS)?)?;
    let mut rm = RewardModel::new(ctx.config.reward.clone(), ctx.config.seed)?;
    let losses = train_reward_model(&mut rm, &catalog.items, &rm_samples(&logs), &ctx.config.reward_train, ctx.config.seed)?;
    rm.save(&ctx.path(RM_CKPT))?;
    let truth = held_out_true_values(&catalog, &ctx.config, &held_users, &held_logs)?;
    let ev = evaluate_reward_model(&rm, &catalog.items, &rm_samples(&held_logs), Some(&truth))?;
    write_text(&ctx.path(RM_LOSS), &format!("step,loss\n{}", join(losses.iter().enumerate().map(|(i, l)| format!("{},{l}\n", i + 1)), "")))?;
    let fmt = |x: Option<f64>| x.map_or("NA".to_string(), |v| format!("{v:.4}"));
    let mut rep = String::from("metric\tvalue\n");
    for (name, a) in TARGETS.iter().zip(ev.auc) {
        writeln!(rep, "auc_{name}\t{}", fmt(a)).expect("string write");
    }
    writeln!(rep, "spearman_true_value\t{}\nheld_out_loss\t{:.6}\nheld_out_sessions\t{}", fmt(ev.spearman), ev.loss, ev.samples)
        .expect("string write");
    write_text(&ctx.path(RM_REPORT), &rep)?;
    ctx.record_timing("train-rm", t)?;
    Ok(format!(
        "held-out AUC swt {} vtr {} wtr {} ltr {} | Spearman vs true value {}",
        fmt(ev.auc[0]),
        fmt(ev.auc[1]),
        fmt(ev.auc[2]),
        fmt(ev.auc[3]),
        fmt(ev.spearman)
    ))
}

const EPOCH_HEADER: &str = "epoch,steps,mean_ntp_loss,dpo_draws,pairs,skipped,mean_dpo_loss,mean_winner_reward,mean_loser_reward,true_value_top1";

fn epoch_row(s: &EpochStats, value: f64) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        s.epoch + 1,
        s.steps,
        s.mean_ntp_loss,
        s.dpo_draws,
        s.pairs,
        s.skipped,
        s.mean_dpo_loss,
        s.mean_winner_reward,
        s.mean_loser_reward,
        value
    )
}

struct AlignInputs {
    catalog: SyntheticCatalog,
    index: ItemIndex,
    seed_model: GenModel,
    rm: RewardModel,
    data: Vec<crate::align::IpaSample>,
    users: Vec<EvalUser>,
}

fn align_inputs(ctx: &RunContext) -> Result<AlignInputs> {
    let catalog = ctx.catalog()?;
    let index = ctx.index(&catalog)?;
    let seed_model = ctx.load_model("seed")?;
    let rm = ctx.load_rm()?;
    let logs = read_logs(&ctx.input(LOGS)?)?;
    let data = ipa_samples(&seed_model, &index, &logs)?;
    let users = ctx.eval_user_set(&seed_model, &index)?;
    Ok(AlignInputs { catalog, index, seed_model, rm, data, users })
}

/// Runs preference alignment from the seed checkpoint; returns the aligned
/// model, per-epoch statistics and the per-epoch top-1 true value.
fn run_ipa(ctx: &RunContext, inp: &AlignInputs, cfg: &IpaConfig, keep_pairs: bool) -> Result<(GenModel, Vec<EpochStats>, Vec<f64>)> {
    let ev = &ctx.config.eval;
    let mut model = inp.seed_model.clone();
    let mut values = Vec::new();
    let stats = ipa_train(&mut model, &inp.rm, &inp.catalog.items, &inp.index, &inp.data, cfg, ctx.config.seed, keep_pairs, |m, _| {
        let v = evaluate_true_value(m, &inp.index, &ctx.config.simulator.feedback, &inp.catalog, &inp.users, ev.top_n, ev.use_kv_cache)?;
        values.push(v.mean_top1);
        Ok(())
    })?;
    Ok((model, stats, values))
}

pub fn align_ipa(ctx: &RunContext, dump_pairs: bool) -> Result<String> {
    let t = Instant::now();
    let inp = align_inputs(ctx)?;
    let ev = &ctx.config.eval;
    let base = evaluate_true_value(&inp.seed_model, &inp.index, &ctx.config.simulator.feedback, &inp.catalog, &inp.users, ev.top_n, ev.use_kv_cache)?;
    let (model, stats, values) = run_ipa(ctx, &inp, &ctx.config.ipa, dump_pairs)?;
    model.save(&ctx.path(ALIGNED_CKPT))?;
    let mut csv = format!("{EPOCH_HEADER}\n0,0,,,,,,,,{}\n", base.mean_top1);
    for (s, v) in stats.iter().zip(&values) {
        csv.push_str(&epoch_row(s, *v));
        csv.push('\n');
    }
    write_text(&ctx.path(IPA_EPOCHS), &csv)?;
    if dump_pairs {
        let lay = inp.seed_model.token_layout();
        let mut s = String::from("epoch\thistory_tokens\twinner\tloser\twinner_reward\tloser_reward\n");
        for st in &stats {
            for p in &st.pair_log {
                let hist = join(p.history.iter().filter(|&&t| t != lay.bos()), ",");
                writeln!(
                    s,
                    "{}\t{hist}\t{}\t{}\t{}\t{}",
                    st.epoch + 1,
                    join(&p.winner, ","),
                    join(&p.loser, ","),
                    p.winner_reward,
                    p.loser_reward
                )
                .expect("string write");
            }
        }
        write_text(&ctx.path(PAIRS), &s)?;
    }
    ctx.record_timing("align-ipa", t)?;
    let last = values.last().copied().unwrap_or(base.mean_top1);
    Ok(format!(
        "pairs {} | top-1 true session value seed {:.4} -> aligned {:.4} ({:+.2}%)",
        stats.iter().map(|s| s.pairs).sum::<usize>(),
        base.mean_top1,
        last,
        100.0 * (last / base.mean_top1 - 1.0)
    ))
}

pub fn evaluate(ctx: &RunContext, model_name: &str) -> Result<String> {
    let t = Instant::now();
    let catalog = ctx.catalog()?;
    let index = ctx.index(&catalog)?;
    let model = ctx.load_model(model_name)?;
    let rm = ctx.load_rm()?;
    let users = ctx.eval_user_set(&model, &index)?;
    let ev = &ctx.config.eval;
    let xtr = evaluate_xtr(&model, &rm, &catalog.items, &index, &users, ev.top_n, ev.use_kv_cache)?;
    let tv = evaluate_true_value(&model, &index, &ctx.config.simulator.feedback, &catalog, &users, ev.top_n, ev.use_kv_cache)?;
    let header = format!(
        "model\tusers\ttop_n\t{}",
        join(TARGETS.iter().map(|t| format!("{t}_mean\t{t}_max")), "\t")
    );
    let p = ctx.path(XTR_TABLE);
    let mut rows = read_keyed(&p, &header)?;
    let cells = join((0..4).map(|k| format!("{:.6}\t{:.6}", xtr.mean[k], xtr.max[k])), "\t");
    rows.insert(model_name.to_string(), format!("{model_name}\t{}\t{}\t{cells}", xtr.users, xtr.top_n));
    write_keyed(&p, &header, &rows)?;
    let th = "model\tusers\ttop_n\tmean_top1\tmean_top_n";
    let p = ctx.path(TRUE_VALUE);
    let mut rows = read_keyed(&p, th)?;
    rows.insert(model_name.to_string(), format!("{model_name}\t{}\t{}\t{:.6}\t{:.6}", tv.users, ev.top_n, tv.mean_top1, tv.mean_top_n));
    write_keyed(&p, th, &rows)?;
    ctx.record_timing(&format!("evaluate-{model_name}"), t)?;
    Ok(format!(
        "{model_name}: {} | true value top-1 {:.4}",
        join(TARGETS.iter().enumerate().map(|(k, n)| format!("{n} {:.4}/{:.4}", xtr.mean[k], xtr.max[k])), " "),
        tv.mean_top1
    ))
}

pub fn entropy(ctx: &RunContext, model_name: &str) -> Result<(String, bool)> {
    let t = Instant::now();
    let catalog = ctx.catalog()?;
    let index = ctx.index(&catalog)?;
    let model = ctx.load_model(model_name)?;
    let users = ctx.eval_user_set(&model, &index)?;
    let encoded = users.iter().map(|u| model.encode_history(&u.tokens)).collect::<Result<Vec<_>>>()?;
    let levels = entropy_report(&model, &encoded, &index)?;
    let mut csv = String::from("level,mean_entropy\n");
    for (l, e) in levels.iter().enumerate() {
        writeln!(csv, "{},{e}", l + 1).expect("string write");
    }
    write_text(&ctx.path(ENTROPY), &csv)?;
    ctx.record_timing("entropy-report", t)?;
    let decreasing = levels.first() > levels.last();
    Ok((format!("{model_name}: mean entropy by level {}", join(levels.iter().map(|e| format!("{e:.4}")), " ")), decreasing))
}

/// Model configuration at another width: head count kept, hidden widths
/// scaled with `d_model`.
pub fn scaled_model(base: &ModelConfig, d_model: usize) -> ModelConfig {
    let ratio = |w: usize| w * d_model / base.d_model;
    ModelConfig { d_model, ffn_hidden: ratio(base.ffn_hidden), expert_hidden: ratio(base.expert_hidden), ..base.clone() }
}

/// Training schedule of one scaling-sweep run.
pub fn scaling_train_config(cfg: &RunConfig) -> TrainConfig {
    let mut tc = TrainConfig { steps: cfg.sweep.scaling_steps, eval_every: 0, target_eval_loss: None, ..cfg.seed_train.train_config() };
    tc.adam.learning_rate = cfg.sweep.scaling_learning_rate;
    tc.adam.warmup_steps = cfg.sweep.scaling_warmup_steps;
    tc.adam.decay_steps = cfg.sweep.scaling_steps as u64;
    tc
}

pub fn sweep_scaling(ctx: &RunContext, mut progress: impl FnMut(&str)) -> Result<String> {
    let t = Instant::now();
    let catalog = ctx.catalog()?;
    let index = ctx.index(&catalog)?;
    let logs = read_logs(&ctx.input(LOGS)?)?;
    let held_logs = read_logs(&ctx.input(HELD_OUT_LOGS)?)?;
    let sw = &ctx.config.sweep;
    let st = &ctx.config.seed_train;
    let mut csv = String::from("seed,d_model,parameters,steps,final_eval_loss\n");
    let mut monotone = 0;
    for &seed in &sw.scaling_seeds {
        let mut losses = Vec::new();
        for &d in &sw.scaling_dims {
            let mut model = GenModel::new(scaled_model(&ctx.config.model, d), seed)?;
            let train = log_samples(&model, &index, &logs)?;
            let held = log_samples(&model, &index, &held_logs)?;
            let held = held_out_eval(&held, st.eval_sessions);
            let tc = scaling_train_config(&ctx.config);
            train_seed_model(&mut model, &train, &[], &tc, seed, |_, _| {})?;
            let loss = mean_eval_loss(&model, held)?;
            writeln!(csv, "{seed},{d},{},{},{loss}", model.store.num_values(), sw.scaling_steps).expect("string write");
            progress(&format!("seed {seed} d_model {d}: held-out loss {loss:.4}"));
            losses.push(loss);
        }
        if losses.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    write_text(&ctx.path(SCALING), &csv)?;
    ctx.record_timing("sweep-scaling", t)?;
    Ok(format!("loss non-increasing in d_model for {monotone} of {} seeds", sw.scaling_seeds.len()))
}

pub fn sweep_rdpo(ctx: &RunContext, mut progress: impl FnMut(&str)) -> Result<String> {
    let t = Instant::now();
    let inp = align_inputs(ctx)?;
    let ev = &ctx.config.eval;
    let base = evaluate_true_value(&inp.seed_model, &inp.index, &ctx.config.simulator.feedback, &inp.catalog, &inp.users, ev.top_n, ev.use_kv_cache)?;
    let mut csv = format!(
        "r_dpo,pairs,true_value_top1,relative_gain,{}\n0,0,{},0,{}\n",
        join(TARGETS.iter().map(|t| format!("{t}_mean")), ","),
        base.mean_top1,
        join(evaluate_xtr(&inp.seed_model, &inp.rm, &inp.catalog.items, &inp.index, &inp.users, ev.top_n, ev.use_kv_cache)?.mean, ",")
    );
    for &r in &ctx.config.sweep.rdpo_ratios {
        let cfg = IpaConfig { r_dpo: r, ..ctx.config.ipa.clone() };
        let (model, stats, values) = run_ipa(ctx, &inp, &cfg, false)?;
        let v = values.last().copied().unwrap_or(base.mean_top1);
        let xtr = evaluate_xtr(&model, &inp.rm, &inp.catalog.items, &inp.index, &inp.users, ev.top_n, ev.use_kv_cache)?;
        let pairs: usize = stats.iter().map(|s| s.pairs).sum();
        writeln!(csv, "{r},{pairs},{v},{},{}", v / base.mean_top1 - 1.0, join(xtr.mean, ",")).expect("string write");
        progress(&format!("r_dpo {r}: top-1 true value {v:.4} ({:+.2}%)", 100.0 * (v / base.mean_top1 - 1.0)));
    }
    write_text(&ctx.path(RDPO), &csv)?;
    ctx.record_timing("sweep-rdpo", t)?;
    Ok(format!("seed model top-1 true value {:.4}; results in {}", base.mean_top1, ctx.path(RDPO).display()))
}

pub fn generate(ctx: &RunContext, model_name: &str) -> Result<String> {
    let t = Instant::now();
    let catalog = ctx.catalog()?;
    let index = ctx.index(&catalog)?;
    let model = ctx.load_model(model_name)?;
    let users = ctx.eval_user_set(&model, &index)?;
    let ev = &ctx.config.eval;
    let mut s = String::from("user\trank\titems\tlog_prob\n");
    let mut count = 0;
    for u in &users {
        for (rank, (items, lp)) in generate_items(&model, &index, &u.tokens, ev.top_n, ev.use_kv_cache)?.iter().enumerate() {
            writeln!(s, "{}\t{}\t{}\t{lp}", u.user.id, rank + 1, join(items, ",")).expect("string write");
            count += 1;
        }
    }
    write_text(&ctx.path(GENERATIONS), &s)?;
    ctx.record_timing("generate", t)?;
    Ok(format!("{count} sessions for {} users written to {}", users.len(), ctx.path(GENERATIONS).display()))
}

/// Appends reward-model predictions and the scalar score to every record
/// of the generation file.
pub fn score(ctx: &RunContext) -> Result<String> {
    let t = Instant::now();
    let catalog = ctx.catalog()?;
    let rm = ctx.load_rm()?;
    let mut users = read_users(&ctx.input(HELD_OUT_USERS)?)?;
    if let Ok(p) = ctx.input(USERS) {
        users.extend(read_users(&p)?);
    }
    let by_id = user_map(&users);
    let gp = ctx.input(GENERATIONS)?;
    let text = std::fs::read_to_string(&gp).map_err(|e| Error::io(&gp, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != "user\trank\titems\tlog_prob" {
        return Err(Error::parse(gp.display().to_string(), "unexpected header"));
    }
    let mut out = format!("{header}\t{}\tscore\n", join(TARGETS, "\t"));
    let mut n = 0;
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let ctxs = format!("{}:{}", gp.display(), i + 2);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::parse(ctxs, "expected 4 fields"));
        }
        let uid: u32 = f[0].parse().map_err(|_| Error::parse(&ctxs, "bad user id"))?;
        let user = by_id.get(&uid).ok_or_else(|| Error::parse(&ctxs, format!("unknown user {uid}")))?;
        let items = f[2]
            .split(',')
            .map(|x| x.parse::<u32>().map(ItemId).map_err(|_| Error::parse(&ctxs, "bad item id")))
            .collect::<Result<Vec<_>>>()?;
        let r = rm.predict_items(&catalog.items, &user.history, &items)?;
        writeln!(out, "{line}\t{}\t{}", join(r.as_array(), "\t"), rm.combine(&r)).expect("string write");
        n += 1;
    }
    write_text(&ctx.path(SCORED), &out)?;
    ctx.record_timing("score", t)?;
    Ok(format!("scored {n} sessions into {}", ctx.path(SCORED).display()))
}
