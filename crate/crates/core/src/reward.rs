//! Per-dimension reward models: a small transformer encoder, mean pooled, with an MLP
//! head squashed to `(0, 1)`.

use std::path::Path;

use log::warn;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::{ParamSet, Tape, Var};
use crate::checkpoint::{params_digest, Checkpoint};
use crate::corpus::{Dimension, IdeaRecord, PaperRecord};
use crate::error::{Error, Result};
use crate::model::vocab::{BOS, SEP};
use crate::model::{block_tape, init_block, Vocab, BLOCK_PARAMS};
use crate::optim::{clip_global_norm, Adam};
use crate::rng::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardLoss {
    /// Soft-target binary cross-entropy.
    Bce,
    /// Squared error of the squashed score.
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub head_hidden: usize,
    pub context_len: usize,
    /// Paper tokens kept in front of the idea.
    pub paper_tokens: usize,
    pub loss: RewardLoss,
    pub seed: u64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 16,
            heads: 2,
            head_hidden: 16,
            context_len: 160,
            paper_tokens: 8,
            loss: RewardLoss::Bce,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    pub dimension: Dimension,
    pub config: RewardConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
}

/// One training example: encoded input tokens and a target in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardExample {
    pub tokens: Vec<usize>,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// Mean training loss before training and after each epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTrace {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

fn normal(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || n.sample(rng))
}

fn squash(logit: f64) -> f64 {
    crate::autograd::sigmoid(logit).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

impl RewardModel {
    /// Fresh model whose final head layer is zero, so every input scores 0.5.
    pub fn new(dimension: Dimension, config: RewardConfig, vocab: Vocab) -> Result<Self> {
        if config.layers == 0
            || config.width < 8
            || config.heads == 0
            || config.width % config.heads != 0
            || config.context_len < config.paper_tokens + 3
        {
            return Err(Error::InvalidArgument(format!("reward config {config:?}")));
        }
        let d = config.width;
        let mut rng = rng_from(&[config.seed, 0x7e3a, dimension.index() as u64]);
        let mut params = ParamSet::new();
        params.push("tok_emb", normal(&mut rng, vocab.len(), d, 0.5));
        for l in 0..config.layers {
            init_block(&mut params, &format!("l{l}"), d, config.layers, &mut rng);
        }
        params.push("lnf.g", Array2::ones((1, d)));
        params.push("lnf.b", Array2::zeros((1, d)));
        params.push("head.w1", normal(&mut rng, d, config.head_hidden, 1.0 / (d as f64).sqrt()));
        params.push("head.b1", Array2::zeros((1, config.head_hidden)));
        params.push("head.w2", Array2::zeros((config.head_hidden, 1)));
        params.push("head.b2", Array2::zeros((1, 1)));
        Ok(Self {
            dimension,
            config,
            vocab,
            params,
        })
    }

    /// `[BOS] paper-tail [SEP] idea`, with the paper truncated to its last tokens.
    ///
    /// Idea tokens past the context length are dropped.
    pub fn encode(&self, paper_context: &[usize], idea: &[usize]) -> Vec<usize> {
        let keep = paper_context.len().saturating_sub(self.config.paper_tokens);
        let mut out = Vec::with_capacity(self.config.context_len);
        out.push(BOS);
        out.extend_from_slice(&paper_context[keep..]);
        out.push(SEP);
        let room = self.config.context_len.saturating_sub(out.len());
        out.extend_from_slice(&idea[..idea.len().min(room)]);
        out
    }

    /// Encodes a paper and an idea text.
    pub fn encode_text(&self, paper: Option<&PaperRecord>, idea_text: &str) -> Vec<usize> {
        let ctx = paper
            .map(|p| self.vocab.paper_context(p, self.config.paper_tokens))
            .unwrap_or_default();
        self.encode(&ctx, &self.vocab.encode(idea_text))
    }

    fn check(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("reward input".into()));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::TooLong {
                len: tokens.len(),
                max: self.config.context_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::OutOfVocab {
                id: bad as u32,
                size: self.vocab.len(),
            });
        }
        Ok(())
    }

    /// Records the pre-squash score of `tokens`.
    pub fn logit_tape(&self, tape: &mut Tape, vars: &[Var], tokens: &[usize]) -> Result<Var> {
        self.check(tokens)?;
        let mut x = tape.gather(vars[0], tokens)?;
        for l in 0..self.config.layers {
            let b = 1 + l * BLOCK_PARAMS;
            x = block_tape(tape, &vars[b..b + BLOCK_PARAMS], x, self.config.heads)?;
        }
        let f = 1 + self.config.layers * BLOCK_PARAMS;
        let h = tape.layer_norm(x, vars[f], vars[f + 1])?;
        let pooled = tape.mean_rows(h);
        let z = tape.matmul(pooled, vars[f + 2])?;
        let z = tape.add_row(z, vars[f + 3])?;
        let z = tape.tanh(z);
        let z = tape.matmul(z, vars[f + 4])?;
        tape.add_row(z, vars[f + 5])
    }

    /// Score in `(0, 1)` of an encoded input.
    pub fn score(&self, tokens: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let z = self.logit_tape(&mut tape, &vars, tokens)?;
        Ok(squash(tape.scalar(z)))
    }

    /// Mean training loss of `batch` recorded on `tape`.
    pub fn loss_tape(&self, tape: &mut Tape, vars: &[Var], batch: &[&RewardExample]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("reward batch".into()));
        }
        let mut total: Option<Var> = None;
        for ex in batch {
            let z = self.logit_tape(tape, vars, &ex.tokens)?;
            let l = match self.config.loss {
                RewardLoss::Bce => tape.bce_logits(z, &[ex.target])?,
                RewardLoss::Mse => {
                    let s = tape.sigmoid(z);
                    tape.mse(s, Array2::from_elem((1, 1), ex.target))?
                }
            };
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        Ok(tape.scale(total.expect("nonempty"), 1.0 / batch.len() as f64))
    }

    /// Mean loss over `examples` at the current parameters.
    pub fn mean_loss(&self, examples: &[RewardExample]) -> Result<f64> {
        let refs: Vec<&RewardExample> = examples.iter().collect();
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let l = self.loss_tape(&mut tape, &vars, &refs)?;
        Ok(tape.scalar(l))
    }

    pub fn digest(&self) -> String {
        params_digest(&self.params)
    }
}

/// Trains `model` with Adam on shuffled mini-batches; the shuffle of epoch `k` is drawn
/// from `(seed, k)`.
pub fn train_reward(model: &mut RewardModel, examples: &[RewardExample], cfg: &RewardTrainConfig) -> Result<RewardTrace> {
    if examples.len() < 2 {
        return Err(Error::InvalidArgument("reward training needs at least 2 examples".into()));
    }
    if let Some(ex) = examples.iter().find(|e| !(0.0..=1.0).contains(&e.target)) {
        return Err(Error::InvalidArgument(format!("reward target {} outside [0, 1]", ex.target)));
    }
    let first = examples[0].target;
    if examples.iter().all(|e| e.target == first) {
        warn!("{} reward model: every target equals {first}", model.dimension.name());
    }
    let initial_loss = model.mean_loss(examples)?;
    let mut opt = Adam::new(&model.params, cfg.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_from(&[cfg.seed, epoch as u64, model.dimension.index() as u64]));
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&RewardExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape, true);
            let loss = model.loss_tape(&mut tape, &vars, &batch)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence(format!("{} reward loss is {value}", model.dimension.name())));
            }
            sum += value * batch.len() as f64;
            let grads = tape.backward(loss);
            let mut g = model.params.collect_grads(&grads, &vars);
            clip_global_norm(&mut g, cfg.clip_norm);
            opt.update(&mut model.params, &g);
        }
        epoch_losses.push(sum / examples.len() as f64);
    }
    Ok(RewardTrace {
        initial_loss,
        epoch_losses,
    })
}

/// Reward models for all three dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardSet {
    pub models: Vec<RewardModel>,
}

impl RewardSet {
    pub fn get(&self, dim: Dimension) -> Result<&RewardModel> {
        self.models
            .iter()
            .find(|m| m.dimension == dim)
            .ok_or_else(|| Error::Missing(format!("{} reward model", dim.name())))
    }

    /// Scores of one encoded-by-parts input under every model, in N, F, E order.
    pub fn score_all(&self, paper_context: &[usize], idea: &[usize]) -> Result<[f64; 3]> {
        let mut out = [0.0; 3];
        for d in Dimension::ALL {
            let m = self.get(d)?;
            out[d.index()] = m.score(&m.encode(paper_context, idea))?;
        }
        Ok(out)
    }

    /// Whole-idea scores of a record, in N, F, E order.
    pub fn score_idea(&self, paper: Option<&PaperRecord>, idea: &IdeaRecord) -> Result<[f64; 3]> {
        let mut out = [0.0; 3];
        for d in Dimension::ALL {
            let m = self.get(d)?;
            out[d.index()] = m.score(&m.encode_text(paper, &idea.full_text()))?;
        }
        Ok(out)
    }

    /// Combined digest of all parameters.
    pub fn digest(&self) -> String {
        let parts: Vec<String> = self.models.iter().map(|m| format!("{}:{}", m.dimension, m.digest())).collect();
        crate::checkpoint::sha256_hex(parts.join(",").as_bytes())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set("kind", Value::from("reward"));
        let meta: Vec<Value> = self
            .models
            .iter()
            .map(|m| serde_json::json!({ "dimension": m.dimension, "config": m.config }))
            .collect();
        ck.set("models", Value::from(meta));
        if let Some(m) = self.models.first() {
            ck.set("vocab", Value::from(m.vocab.tokens().to_vec()));
        }
        for m in &self.models {
            ck.add_params(&format!("reward.{}", m.dimension.tag()), &m.params);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, origin: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            msg,
        };
        #[derive(Deserialize)]
        struct Meta {
            dimension: Dimension,
            config: RewardConfig,
        }
        let meta: Vec<Meta> = serde_json::from_value(ck.get("models").cloned().ok_or_else(|| fail("no reward metadata".into()))?)
            .map_err(|e| fail(format!("reward metadata: {e}")))?;
        let tokens: Vec<String> = serde_json::from_value(ck.get("vocab").cloned().ok_or_else(|| fail("no vocabulary".into()))?)
            .map_err(|e| fail(format!("vocabulary: {e}")))?;
        let vocab = Vocab::from_tokens(tokens)?;
        let mut models = Vec::new();
        for m in meta {
            let mut model = RewardModel::new(m.dimension, m.config, vocab.clone())?;
            let params = ck.params(&format!("reward.{}", m.dimension.tag()));
            if params.names() != model.params.names()
                || params.values().iter().zip(model.params.values()).any(|(a, b)| a.dim() != b.dim())
            {
                return Err(fail(format!("{} reward parameters do not match the configuration", m.dimension)));
            }
            model.params = params;
            models.push(model);
        }
        Ok(Self { models })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

/// Splits generated token ids into sentences: a sentence ends at a terminator or the
/// separator token. A trailing unterminated run forms a last sentence.
pub fn split_token_sentences(vocab: &Vocab, tokens: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for &t in tokens {
        if t == crate::model::vocab::EOS {
            break;
        }
        cur.push(t);
        if vocab.is_boundary(t) {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Per-sentence `(r̂_n, r̂_f, r̂_e)`. Each sentence is scored on its own behind the paper
/// context, so a sentence's score depends on nothing that follows it.
pub fn score_token_sentences(
    models: &RewardSet,
    paper_context: &[usize],
    sentences: &[Vec<usize>],
) -> Result<Vec<[f64; 3]>> {
    if sentences.is_empty() {
        return Err(Error::Empty("idea has no sentences".into()));
    }
    sentences.iter().map(|s| models.score_all(paper_context, s)).collect()
}

/// Per-sentence scores of an idea record.
pub fn score_sentences(models: &RewardSet, paper: Option<&PaperRecord>, idea: &IdeaRecord) -> Result<Vec<[f64; 3]>> {
    let vocab = &models.get(Dimension::Novelty)?.vocab;
    let ctx = paper.map(|p| vocab.paper_context(p, usize::MAX)).unwrap_or_default();
    let sentences: Vec<Vec<usize>> = idea.sentences.iter().map(|s| vocab.encode(s)).collect();
    score_token_sentences(models, &ctx, &sentences)
}
