//! Pipeline stages driven by a [`RunConfig`], each writing its artifacts and a run
//! manifest into the output directory.
//!
//! A manifest records the command, the full configuration, the crate version, and
//! SHA-256 digests of every input and output. Feeding the manifest back as the
//! configuration of the same command reproduces the outputs byte for byte.

pub mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{ConfigValue, DecodeMode, RunConfig};

use crate::checkpoint::{file_digest, Checkpoint};
use crate::corpus::{
    filter_records, load_records, Entry, FilterConfig, ScoreRanges, ScoreRecord, IDEAS_FILE, MANIFEST_FILE, PAPERS_FILE,
    SCORES_FILE,
};
use crate::corpus::{split_corpus, synth_corpus, Corpus, CorpusSplit, Dimension, IdeaRecord, MarkerSpec, PaperRecord, SplitFractions};
use crate::decode::{
    build_predictor_dataset, dynamic_decode, score_decoded, static_decode, train_predictor, DecodeOptions, Decoded,
    PredictorConfig, PredictorTrainConfig, ScheduleScale, WeightPredictor,
};
use crate::error::{Error, Result};
use crate::evalsuite::{
    emit_report, pearson, position_profile, read_profile, read_sweep, spearman, sweep_tradeoff, write_sweep_csv,
    CorrelationRow, EvalResults, CORRELATION_CSV, PROFILE_CSV, SWEEP_CSV,
};
use crate::model::{ModelConfig, Proposer, SampleOptions};
use crate::pipeline::{build_vocab, reward_examples, train_reward_set};
use crate::reward::{score_sentences, score_token_sentences, RewardConfig, RewardSet, RewardTrainConfig};
use crate::rl::{load_policy, model_digest, rl_checkpoint, train_rl, Policy, PpoConfig, RlOptimizers, ValueHeads};
use crate::rng::{derive_seed, rng_from, text_code};
use crate::sft::{save_sft, train_sft, SftConfig};
use crate::steer::{AdapterSet, ControlVector};

pub const RUN_MANIFEST: &str = "run-manifest.json";
pub const SFT_CKPT: &str = "sft.ckpt";
pub const SFT_REPORT: &str = "sft_report.csv";
pub const SFT_SUMMARY: &str = "sft_summary.csv";
pub const REWARDS_CKPT: &str = "rewards.ckpt";
pub const REWARDS_REPORT: &str = "rewards_report.csv";
pub const POLICY_CKPT: &str = "policy.ckpt";
pub const RL_TRACE: &str = "rl_trace.csv";
pub const PREDICTOR_CKPT: &str = "predictor.ckpt";
pub const PREDICTOR_REPORT: &str = "predictor_report.csv";
pub const IDEAS_JSONL: &str = "ideas.jsonl";
pub const IDEAS_TXT: &str = "ideas.txt";
pub const REJECTED_CSV: &str = "rejected.csv";
pub const IDEA_SCORES_JSONL: &str = "idea_scores.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    Ingest,
    Sft,
    TrainRewards,
    Rl,
    Decode,
    Sweep,
    Eval,
    Report,
    Score,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Sft,
        Stage::TrainRewards,
        Stage::Rl,
        Stage::Decode,
        Stage::Sweep,
        Stage::Eval,
        Stage::Report,
        Stage::Score,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Sft => "sft",
            Stage::TrainRewards => "train-rewards",
            Stage::Rl => "rl",
            Stage::Decode => "decode",
            Stage::Sweep => "sweep",
            Stage::Eval => "eval",
            Stage::Report => "report",
            Stage::Score => "score",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// The configuration in `key = value` form.
    pub config: String,
    /// Input path to digest.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to digest.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        c.apply_text(&self.config, Path::new("<manifest config>"))?;
        Ok(c)
    }
}

/// Reads a configuration file: either `key = value` text or a run manifest, whose
/// stored configuration is used.
pub fn load_config_file(path: &Path, into: &mut RunConfig) -> Result<Option<RunManifest>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('{') {
        let m = RunManifest::load(path)?;
        into.apply_text(&m.config, path)?;
        Ok(Some(m))
    } else {
        into.apply_text(&text, path)?;
        Ok(None)
    }
}

/// What a stage wrote, plus human-readable summary lines.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub manifest: RunManifest,
    pub out: PathBuf,
    pub summary: Vec<String>,
}

struct Ctx {
    out: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    summary: Vec<String>,
}

impl Ctx {
    fn input_file(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    fn input_corpus(&mut self, dir: &Path) -> Result<Corpus> {
        let c = Corpus::load(dir)?;
        self.inputs.insert(dir.display().to_string(), c.digest()?);
        Ok(c)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn note(&mut self, line: String) {
        self.summary.push(line);
    }
}

/// Runs one stage.
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<StageOutcome> {
    let out = cfg.require_path("out")?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut ctx = Ctx {
        out: out.clone(),
        inputs: BTreeMap::new(),
        outputs: Vec::new(),
        summary: Vec::new(),
    };
    match stage {
        Stage::Synth => synth(cfg, &mut ctx)?,
        Stage::Ingest => ingest(cfg, &mut ctx)?,
        Stage::Sft => sft(cfg, &mut ctx)?,
        Stage::TrainRewards => train_rewards(cfg, &mut ctx)?,
        Stage::Rl => rl(cfg, &mut ctx)?,
        Stage::Decode => decode(cfg, &mut ctx)?,
        Stage::Sweep => sweep(cfg, &mut ctx)?,
        Stage::Eval => eval(cfg, &mut ctx)?,
        Stage::Report => report(cfg, &mut ctx)?,
        Stage::Score => score(cfg, &mut ctx)?,
    }
    let mut outputs = BTreeMap::new();
    for p in &ctx.outputs {
        let name = p.strip_prefix(&out).unwrap_or(p).display().to_string();
        outputs.insert(name, file_digest(p)?);
    }
    let manifest = RunManifest {
        command: stage.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.to_text(),
        inputs: ctx.inputs,
        outputs,
    };
    let path = out.join(RUN_MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(StageOutcome {
        manifest,
        out,
        summary: ctx.summary,
    })
}

fn fractions(cfg: &RunConfig) -> SplitFractions {
    SplitFractions {
        sft: cfg.split_sft,
        reward: cfg.split_reward,
    }
}

fn write_corpus(corpus: &Corpus, ctx: &mut Ctx) -> Result<()> {
    corpus.save(&ctx.out)?;
    for f in [PAPERS_FILE, IDEAS_FILE, SCORES_FILE, MANIFEST_FILE] {
        ctx.path(f);
    }
    ctx.note(format!("corpus digest {}", corpus.digest()?));
    Ok(())
}

fn synth(cfg: &RunConfig, ctx: &mut Ctx) -> Result<()> {
    if cfg.n == 0 {
        return Err(Error::Config {
            key: "n".into(),
            msg: "must be at least 1".into(),
        });
    }
    let spec = if cfg.orthogonal {
        MarkerSpec::orthogonal()
    } else {
        MarkerSpec::default()
    };
    let mut corpus = synth_corpus(cfg.seed, cfg.n, &spec);
    corpus.split = Some(split_corpus(&corpus, fractions(cfg), cfg.seed)?);
    ctx.note(format!("{} papers, {} ideas", corpus.papers.len(), corpus.ideas.len()));
    write_corpus(&corpus, ctx)
}

fn ingest(cfg: &RunConfig, ctx: &mut Ctx) -> Result<()> {
    let dir = cfg.require_path("input")?;
    let mut files = vec![dir.join(PAPERS_FILE), dir.join(IDEAS_FILE)];
    let scores_path = dir.join(SCORES_FILE);
    if scores_path.exists() {
        files.push(scores_path.clone());
    }
    for f in &files {
        ctx.input_file(f)?;
    }
    let (papers, seed) = load_records::<PaperRecord>(&files[0])?;
    let (ideas, _) = load_records::<IdeaRecord>(&files[1])?;
    let scores: Vec<ScoreRecord> = if files.len() > 2 {
        load_records(&scores_path)?.0
    } else {
        Vec::new()
    };
    let entries = ideas
        .into_iter()
        .map(|idea| {
            let paper = papers
                .iter()
                .find(|p| p.id == idea.source_paper_id)
                .cloned()
                .ok_or_else(|| Error::InvalidRecord {
                    id: idea.id.clone(),
                    msg: format!("source paper `{}` not found", idea.source_paper_id),
                })?;
            let s = scores.iter().find(|s| s.idea_id == idea.id).cloned();
            Ok(Entry { paper, idea, scores: s })
        })
        .collect::<Result<Vec<_>>>()?;
    let (kept, rejected) = filter_records(
        entries,
        &FilterConfig {
            min_sentences: cfg.min_sentences,
        },
    );
    let rej_path = ctx.path(REJECTED_CSV);
    let mut w = csv::Writer::from_path(&rej_path)?;
    w.write_record(["idea_id", "reason"])?;
    for (e, why) in &rejected {
        w.write_record([e.idea.id.as_str(), why.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(&rej_path, e))?;
    let mut corpus = Corpus {
        seed: seed.or(Some(cfg.seed)),
        papers,
        ideas: kept.iter().map(|e| e.idea.clone()).collect(),
        scores: kept.iter().filter_map(|e| e.scores.clone()).collect(),
        ranges: ScoreRanges::default(),
        split: None,
        marker_spec: None,
    };
    corpus.validate()?;
    corpus.split = Some(split_corpus(&corpus, fractions(cfg), cfg.seed)?);
    ctx.note(format!("kept {} ideas, rejected {}", kept.len(), rejected.len()));
    write_corpus(&corpus, ctx)
}

fn sft_config(cfg: &RunConfig) -> SftConfig {
    SftConfig {
        epochs: cfg.sft_epochs,
        batch_size: cfg.sft_batch,
        lr: cfg.sft_lr,
        momentum: cfg.sft_momentum,
        clip_norm: cfg.sft_clip,
        seed: derive_seed(&[cfg.seed, 0x5f70]),
        max_context: cfg.max_context,
        eval_fraction: cfg.sft_eval_fraction,
    }
}

fn sft(cfg: &RunConfig, ctx: &mut Ctx) -> Result<()> {
    let corpus = ctx.input_corpus(&cfg.require_path("corpus")?)?;
    let split = corpus.resolve_split()?;
    let vocab = build_vocab(&corpus, cfg.vocab_max)?;
    let mc = ModelConfig {
        layers: cfg.layers,
        width: cfg.width,
        heads: cfg.heads,
        context_len: cfg.context_len,
        vocab_size: vocab.len(),
        seed: derive_seed(&[cfg.seed, 0x1417]),
    };
    let mut model = Proposer::new(mc, vocab)?;
    let report = train_sft(&mut model, &split.sft_pairs, &sft_config(cfg))?;
    save_sft(&model, &report.optimizer, &ctx.path(SFT_CKPT))?;
    report.write_csv(&ctx.path(SFT_REPORT))?;
    report.write_summary_csv(&ctx.path(SFT_SUMMARY))?;
    ctx.note(format!(
        "sft: {} train / {} held-out pairs, loss {:.4} -> {:.4}",
        report.train_count, report.heldout_count, report.initial_loss, report.final_loss
    ));
    if let (Some(p), Some(u)) = (report.heldout_perplexity, report.unigram_perplexity) {
        ctx.note(format!("held-out perplexity {p:.3} (unigram {u:.3})"));
    }
    Ok(())
}

fn reward_config(cfg: &RunConfig) -> RewardConfig {
    RewardConfig {
        layers: cfg.reward_layers,
        width: cfg.reward_width,
        heads: cfg.reward_heads,
        head_hidden: cfg.reward_hidden,
        context_len: cfg.reward_context,
        paper_tokens: cfg.reward_paper_tokens,
        loss: cfg.reward_loss,
        seed: derive_seed(&[cfg.seed, 0x7e3a]),
    }
}

/// Reward-split idea ids divided into training and held-out parts by a seeded shuffle.
pub fn reward_partition(corpus: &Corpus, cfg: &RunConfig) -> Result<(Vec<String>, Vec<String>)> {
    let split = corpus
        .split
        .as_ref()
        .ok_or_else(|| Error::Missing("corpus manifest has no split".into()))?;
    let mut ids = split.reward.clone();
    ids.shuffle(&mut rng_from(&[cfg.seed, 0x4e1d]));
    if !(0.0..1.0).contains(&cfg.reward_heldout) {
        return Err(Error::Config {
            key: "reward_heldout".into(),
            msg: format!("{} outside [0, 1)", cfg.reward_heldout),
        });
    }
    let n_held = (ids.len() as f64 * cfg.reward_heldout).round() as usize;
    let held = ids.split_off(ids.len() - n_held);
    Ok((ids, held))
}

/// Pearson and Spearman correlation of predicted and stored scores on `ids`, per dimension.
pub fn reward_fidelity(corpus: &Corpus, rewards: &RewardSet, ids: &[String]) -> Result<Vec<CorrelationRow>> {
    let mut rows = Vec::new();
    for m in &rewards.models {
        let examples = reward_examples(corpus, m, ids)?;
        let pred = examples.iter().map(|e| m.score(&e.tokens)).collect::<Result<Vec<_>>>()?;
        let target: Vec<f64> = examples.iter().map(|e| e.target).collect();
        rows.push(CorrelationRow {
            name: format!("reward_{}", m.dimension.tag()),
            pearson: pearson(&pred, &target)?,
            spearman: spearman(&pred, &target)?,
            count: ids.len(),
        });
    }
    Ok(rows)
}

fn train_rewards(cfg: &RunConfig, ctx: &mut Ctx) -> Result<()> {
    let corpus = ctx.input_corpus(&cfg.require_path("corpus")?)?;
    let sft_path = cfg.require_path("sft_model")?;
    ctx.input_file(&sft_path)?;
    let vocab = Proposer::load(&sft_path)?.vocab;
    let (train, held) = reward_partition(&corpus, cfg)?;
    let tc = RewardTrainConfig {
        epochs: cfg.reward_epochs,
        batch_size: cfg.reward_batch,
        lr: cfg.reward_lr,
        clip_norm: 1.0,
        seed: derive_seed(&[cfg.seed, 0x7e3b]),
    };
    let (set, traces) = train_reward_set(&corpus, &vocab, &reward_config(cfg), &tc, &train)?;
    set.save(&ctx.path(REWARDS_CKPT))?;
    let fidelity = if held.len() >= 2 {
        Some(reward_fidelity(&corpus, &set, &held)?)
    } else {
        None
    };
    let path = ctx.path(REWARDS_REPORT);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["dimension", "initial_loss", "final_loss", "heldout_pearson", "heldout_spearman", "train", "heldout"])?;
    for (i, (m, t)) in set.models.iter().zip(&traces).enumerate() {
        let last = t.epoch_losses.last().copied().unwrap_or(t.initial_loss);
        let (p, s) = fidelity
            .as_ref()
            .map(|f| (f[i].pearson.to_string(), f[i].spearman.to_string()))
            .unwrap_or_default();
        w.write_record([
            m.dimension.tag().to_string(),
            t.initial_loss.to_string(),
            last.to_string(),
            p.clone(),
            s.clone(),
            train.len().to_string(),
            held.len().to_string(),
        ])?;
        ctx.note(format!(
            "reward {}: loss {:.4} -> {:.4}, held-out spearman {}",
            m.dimension.tag(),
            t.initial_loss,
            last,
            if s.is_empty() { "n/a".into() } else { s }
        ));
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn ppo_config(cfg: &RunConfig) -> PpoConfig {
    PpoConfig {
        gamma: cfg.gamma,
        lambda: cfg.lambda,
        clip: cfg.clip,
        inner_iters: cfg.inner_iters,
        steps: cfg.rl_steps,
        batch_size: cfg.rl_batch,
        reward_weight: 1.0,
        reward_sign: cfg.reward_sign,
        kl_coef: cfg.kl_coef,
        kl_ceiling: cfg.kl_ceiling,
        divergence_bound: cfg.divergence_bound,
        lr: cfg.rl_lr,
        value_lr: cfg.value_lr,
        trunk_lr: cfg.trunk_lr,
        clip_norm: cfg.clip_norm,
        temperature: cfg.temperature,
        max_len: cfg.max_len,
        max_context: cfg.max_context,
        normalize_advantages: cfg.normalize_advantages,
        train_trunk: cfg.train_trunk,
        dimensions: cfg.dimensions.clone(),
        seed: derive_seed(&[cfg.seed, 0x9904]),
    }
}

/// The first `rl_prompts` prompt papers.
pub fn rl_prompts(split: &CorpusSplit, cfg: &RunConfig) -> Vec<PaperRecord> {
    split.eval_set.iter().take(cfg.rl_prompts).cloned().collect()
}

/// Up to `count` prompt papers not used by RL; falls back to the RL pool when none are left.
pub fn heldout_prompts(split: &CorpusSplit, cfg: &RunConfig, count: usize) -> Vec<PaperRecord> {
    let rest: Vec<PaperRecord> = split.eval_set.iter().skip(cfg.rl_prompts).take(count).cloned().collect();
    if rest.is_empty() {
        split.eval_set.iter().take(count).cloned().collect()
    } else {
        rest
    }
}

fn rl(cfg: &RunConfig, ctx: &mut Ctx) -> Result<()> {
    let corpus = ctx.input_corpus(&cfg.require_path("corpus")?)?;
    let sft_path = cfg.require_path("sft_model")?;
    let rewards_path = cfg.require_path("rewards")?;
    ctx.input_file(&sft_path)?;
    ctx.input_file(&rewards_path)?;
    let model = Proposer::load(&sft_path)?;
    let rewards = RewardSet::load(&rewards_path)?;
    let prompts = rl_prompts(&corpus.resolve_split()?, cfg);
    let attach = cfg.attach_layer.unwrap_or(model.config.layers - 1);
    if attach >= model.config.layers {
        return Err(Error::Config {
            key: "attach_layer".into(),
            msg: format!("{attach} but the model has {} layers", model.config.layers),
        });
    }
    let width = model.config.width;
    let sft_digest = model_digest(&model);
    let mut policy = Policy {
        model,
        adapters: AdapterSet::zeros(width, &[attach]),
        values: ValueHeads::zeros(width),
    };
    let pc = ppo_config(cfg);
    let mut opts = RlOptimizers::new(&policy, &pc)?;
    let report = train_rl(&mut policy, &mut opts, &prompts, &rewards, &pc, |_, _| {})?;
    for d in &pc.dimensions {
        if let Some(a) = policy.adapters.get_mut(*d) {
            a.trained = true;
        }
    }
    rl_checkpoint(&policy, &opts, &pc).save(&ctx.path(POLICY_CKPT))?;
    report.write_csv(&ctx.path(RL_TRACE))?;
    ctx.note(format!("rl: {} steps over {} prompts, max kl {:.4}", report.trace.len(), prompts.len(), report.max_kl));
    let window = (report.trace.len() / 3).clamp(1, 10);
    for (tag, f) in [
        ("N", (|r: &crate::rl::RlStepRecord| r.reward_n) as fn(&crate::rl::RlStepRecord) -> f64),
        ("F", |r| r.reward_f),
        ("E", |r| r.reward_e),
    ] {
        if let Some((a, b)) = report.window_means(window, f) {
            if a.is_finite() {
                ctx.note(format!("reward {tag}: first {window} steps {a:.4}, last {window} steps {b:.4}"));
            }
        }
    }
    let same = if pc.train_trunk { "updated" } else if model_digest(&policy.model) == sft_digest { "unchanged" } else { "CHANGED" };
    ctx.note(format!("proposer weights {same}; reward digest {}", report.reward_digest));
    Ok(())
}

fn decode_options(cfg: &RunConfig) -> DecodeOptions {
    DecodeOptions {
        sample: SampleOptions {
            temperature: cfg.temperature,
            max_len: cfg.max_len,
        },
        max_context: cfg.max_context,
        max_sentences: cfg.max_sentences,
        eps_max: cfg.eps_max,
    }
}

fn predictor_config(cfg: &RunConfig, vocab_size: usize) -> PredictorConfig {
    PredictorConfig {
        embed: cfg.predictor_embed,
        hidden: cfg.predictor_hidden,
        bins: cfg.bins,
        eps_max: cfg.eps_max,
        vocab_size,
        seed: derive_seed(&[cfg.seed, 0x9e1d]),
    }
}

/// Generates `predictor_ideas` ideas under random gains in `[0, ε_max/2]`, extracts their
/// schedules and trains a predictor on those scoring above the threshold.
fn fit_predictor(
    cfg: &RunConfig,
    ctx: &mut Ctx,
    model: &Proposer,
    adapters: &AdapterSet,
    rewards: &RewardSet,
    prompts: &[PaperRecord],
) -> Result<WeightPredictor> {
    if prompts.is_empty() {
        return Err(Error::Empty("no prompts for predictor data".into()));
    }
    let opts = decode_options(cfg);
    let mut rng = rng_from(&[cfg.seed, 0xda7a]);
    let mut scored = Vec::with_capacity(cfg.predictor_ideas);
    for k in 0..cfg.predictor_ideas {
        let paper = &prompts[k % prompts.len()];
        let half = cfg.eps_max / 2.0;
        let cv = ControlVector::new(rng.gen_range(0.0..=half), rng.gen_range(0.0..=half), rng.gen_range(0.0..=half));
        let d = static_decode(model, adapters, paper, cv, rng.gen(), &opts)?;
        scored.push(score_decoded(rewards, paper, &d)?);
    }
    let all: Vec<Vec<[f64; 3]>> = scored.iter().map(|s| s.sentence_scores.clone()).collect();
    let scale = ScheduleScale::fit(&all, cfg.eps_max, cfg.normalization)?;
    let pairs = build_predictor_dataset(&scored, &scale, cfg.threshold)?;
    let tc = PredictorTrainConfig {
        epochs: cfg.predictor_epochs,
        batch_size: cfg.predictor_batch,
        lr: cfg.predictor_lr,
        clip_norm: 1.0,
        seed: derive_seed(&[cfg.seed, 0x51ed]),
    };
    let (p, trace) = train_predictor(&pairs, predictor_config(cfg, model.vocab.len()), &tc)?;
    p.save(&ctx.path(PREDICTOR_CKPT))?;
    let path = ctx.path(PREDICTOR_REPORT);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["epoch", "loss"])?;
    w.write_record(["0".to_string(), trace.initial_loss.to_string()])?;
    for (i, l) in trace.epoch_losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let kept = scored.iter().filter(|s| s.overall > cfg.threshold).count();
    ctx.note(format!(
        "predictor: {kept} of {} ideas above {}, {} pairs, loss {:.4} -> {:.4}",
        scored.len(),
        cfg.threshold,
        pairs.len(),
        trace.initial_loss,
        trace.epoch_losses.last().copied().unwrap_or(trace.initial_loss)
    ));
    Ok(p)
}

#[derive(Serialize)]
struct DecodedLine<'a> {
    idea_id: &'a str,
    paper_id: &'a str,
    text: &'a str,
    sentences: &'a [String],
    schedule: Vec<[f64; 3]>,
    ended_with_eos: bool,
    truncated: bool,
}

fn decode(cfg: &RunConfig, ctx: &mut Ctx) -> Result<()> {
    let corpus = ctx.input_corpus(&cfg.require_path("corpus")?)?;
    let policy_path = cfg.require_path("policy")?;
    ctx.input_file(&policy_path)?;
    let (model, adapters) = load_policy(&policy_path)?;
    let split = corpus.resolve_split()?;
    let prompts = heldout_prompts(&split, cfg, cfg.decode_prompts);
    let opts = decode_options(cfg);
    let predictor = match cfg.mode {
        DecodeMode::Static => None,
        DecodeMode::Dynamic => Some(match &cfg.predictor {
            Some(p) => {
                ctx.input_file(p)?;
                WeightPredictor::load(p)?
            }
            None => {
                let rewards_path = cfg.require_path("rewards")?;
                ctx.input_file(&rewards_path)?;
                let rewards = RewardSet::load(&rewards_path)?;
                fit_predictor(cfg, ctx, &model, &adapters, &rewards, &rl_prompts(&split, cfg))?
            }
        }),
    };
    let mut decoded: Vec<Decoded> = Vec::new();
    for paper in &prompts {
        let seed = derive_seed(&[cfg.seed, text_code(&paper.id)]);
        decoded.push(match &predictor {
            None => static_decode(&model, &adapters, paper, cfg.eps, seed, &opts)?,
            Some(p) => dynamic_decode(&model, &adapters, p, paper, seed, &opts)?,
        });
    }
    let mut jsonl = String::new();
    let mut txt = String::new();
    for (k, d) in decoded.iter().enumerate() {
        let line = DecodedLine {
            idea_id: &d.idea.id,
            paper_id: &d.idea.source_paper_id,
            text: &d.idea.method_text,
            sentences: &d.idea.sentences,
            schedule: d.schedule.steps.iter().map(|c| c.as_array()).collect(),
            ended_with_eos: d.ended_with_eos,
            truncated: d.truncated,
        };
        jsonl.push_str(&serde_json::to_string(&line)?);
        jsonl.push('\n');
        txt.push_str(&format!("# {} ({})\n{}\n\n", d.idea.id, d.idea.source_paper_id, d.idea.method_text));
        d.schedule.write_csv(&ctx.path(&format!("schedule-{k:03}.csv")))?;
    }
    for (name, body) in [(IDEAS_JSONL, jsonl), (IDEAS_TXT, txt)] {
        let p = ctx.path(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    let truncated = decoded.iter().filter(|d| d.truncated).count();
    ctx.note(format!(
        "decoded {} ideas ({} mode), {} truncated at {} sentences",
        decoded.len(),
        if predictor.is_some() { "dynamic" } else { "static" },
        truncated,
        cfg.max_sentences
    ));
    Ok(())
}

fn load_trained(cfg: &RunConfig, ctx: &mut Ctx) -> Result<(Corpus, Proposer, AdapterSet, RewardSet)> {
    let corpus = ctx.input_corpus(&cfg.require_path("corpus")?)?;
    let policy_path = cfg.require_path("policy")?;
    let rewards_path = cfg.require_path("rewards")?;
    ctx.input_file(&policy_path)?;
    ctx.input_file(&rewards_path)?;
    let (model, adapters) = load_policy(&policy_path)?;
    Ok((corpus, model, adapters, RewardSet::load(&rewards_path)?))
}

fn sweep(cfg: &RunConfig, ctx: &mut Ctx) -> Result<()> {
    let (corpus, model, adapters, rewards) = load_trained(cfg, ctx)?;
    let prompts = heldout_prompts(&corpus.resolve_split()?, cfg, cfg.sweep_prompts);
    let opts = decode_options(cfg);
    let mut held = 0;
    for &s in &cfg.sweep_seeds {
        let r = sweep_tradeoff(&model, &adapters, &rewards, &prompts, &cfg.gains, &[s], &opts)?;
        write_sweep_csv(&ctx.path(&format!("sweep-seed{s}.csv")), &r)?;
        let ok = r.n_non_decreasing() && r.f_non_increasing();
        held += ok as usize;
        ctx.note(format!(
            "seed {s}: novelty non-decreasing {}, feasibility non-increasing {}",
            r.n_non_decreasing(),
            r.f_non_increasing()
        ));
    }
    let all = sweep_tradeoff(&model, &adapters, &rewards, &prompts, &cfg.gains, &cfg.sweep_seeds, &opts)?;
    let results = EvalResults {
        sweep: Some(all),
        ..Default::default()
    };
    for p in emit_report(&results, &ctx.out)? {
        ctx.outputs.push(p);
    }
    ctx.note(format!("trade-off direction held in {held} of {} seeds", cfg.sweep_seeds.len()));
    Ok(())
}

fn eval(cfg: &RunConfig, ctx: &mut Ctx) -> Result<()> {
    let (corpus, model, adapters, rewards) = load_trained(cfg, ctx)?;
    let (_, held) = reward_partition(&corpus, cfg)?;
    let correlations = if held.len() >= 2 {
        reward_fidelity(&corpus, &rewards, &held)?
    } else {
        Vec::new()
    };
    let split = corpus.resolve_split()?;
    let opts = decode_options(cfg);
    let mut scored = Vec::new();
    for paper in heldout_prompts(&split, cfg, cfg.decode_prompts) {
        let seed = derive_seed(&[cfg.seed, text_code(&paper.id)]);
        let d = static_decode(&model, &adapters, &paper, cfg.eps, seed, &opts)?;
        let ctx_tokens = rewards.get(Dimension::Novelty)?.vocab.paper_context(&paper, usize::MAX);
        scored.push(score_token_sentences(&rewards, &ctx_tokens, &d.sentences)?);
    }
    let results = EvalResults {
        sweep: None,
        profile: Some(position_profile(&scored)?),
        correlations,
    };
    for c in &results.correlations {
        ctx.note(format!("{}: pearson {:.4}, spearman {:.4}", c.name, c.pearson, c.spearman));
    }
    for p in emit_report(&results, &ctx.out)? {
        ctx.outputs.push(p);
    }
    Ok(())
}

fn report(cfg: &RunConfig, ctx: &mut Ctx) -> Result<()> {
    let dir = cfg.require_path("input")?;
    let mut results = EvalResults::default();
    let sweep = dir.join(SWEEP_CSV);
    if sweep.exists() {
        ctx.input_file(&sweep)?;
        results.sweep = Some(read_sweep(&sweep)?);
    }
    let profile = dir.join(PROFILE_CSV);
    if profile.exists() {
        ctx.input_file(&profile)?;
        results.profile = Some(read_profile(&profile)?);
    }
    let corr = dir.join(CORRELATION_CSV);
    if corr.exists() {
        ctx.input_file(&corr)?;
        let mut r = csv::Reader::from_path(&corr)?;
        results.correlations = r.deserialize().collect::<std::result::Result<_, _>>()?;
    }
    if results == EvalResults::default() {
        return Err(Error::Missing(format!("{} holds no report tables", dir.display())));
    }
    for p in emit_report(&results, &ctx.out)? {
        ctx.outputs.push(p);
    }
    ctx.note(format!("report written to {}", ctx.out.display()));
    Ok(())
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    idea_id: &'a str,
    paper_id: &'a str,
    scores: [f64; 3],
    sentences: Vec<[f64; 3]>,
}

fn score(cfg: &RunConfig, ctx: &mut Ctx) -> Result<()> {
    let corpus = ctx.input_corpus(&cfg.require_path("corpus")?)?;
    let rewards_path = cfg.require_path("rewards")?;
    ctx.input_file(&rewards_path)?;
    let rewards = RewardSet::load(&rewards_path)?;
    let mut body = String::new();
    for idea in &corpus.ideas {
        let paper = corpus.paper(&idea.source_paper_id);
        let line = ScoreLine {
            idea_id: &idea.id,
            paper_id: &idea.source_paper_id,
            scores: rewards.score_idea(paper, idea)?,
            sentences: score_sentences(&rewards, paper, idea)?,
        };
        body.push_str(&serde_json::to_string(&line)?);
        body.push('\n');
    }
    let p = ctx.path(IDEA_SCORES_JSONL);
    std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    ctx.note(format!("scored {} ideas", corpus.ideas.len()));
    Ok(())
}

/// Loads a checkpoint only to report its kind; used by callers that accept several.
pub fn checkpoint_kind(path: &Path) -> Result<String> {
    let ck = Checkpoint::load(path)?;
    Ok(ck.get("kind").and_then(|v| v.as_str()).unwrap_or("unknown").to_string())
}
