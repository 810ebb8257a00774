//! Supervised fine-tuning on `[BOS] paper [SEP] idea [EOS]` sequences with the loss
//! restricted to the idea span.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::corpus::{IdeaRecord, PaperRecord};
use crate::error::{Error, Result};
use crate::model::vocab::{BOS, EOS, SEP};
use crate::model::{Proposer, Vocab};
use crate::optim::{clip_global_norm, Momentum};
use crate::rng::rng_from;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Paper tokens kept in the prompt.
    pub max_context: usize,
    pub eval_fraction: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            clip_norm: 1.0,
            seed: 0,
            max_context: 16,
            eval_fraction: 0.1,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || self.max_context == 0 {
            return Err(Error::InvalidArgument(format!("sft config {self:?}")));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("eval fraction {} outside (0, 1)", self.eval_fraction)));
        }
        Ok(())
    }
}

/// `[BOS] paper-context [SEP]`.
pub fn prompt_tokens(vocab: &Vocab, paper: &PaperRecord, max_context: usize) -> Vec<usize> {
    let mut out = vec![BOS];
    out.extend(vocab.paper_context(paper, max_context));
    out.push(SEP);
    out
}

/// Teacher-forcing inputs and masked next-token targets for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SftExample {
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl SftExample {
    pub fn target_count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Builds the training example of one pair; `None` when the sequence exceeds `context_len`.
pub fn encode_pair(
    vocab: &Vocab,
    paper: &PaperRecord,
    idea: &IdeaRecord,
    max_context: usize,
    context_len: usize,
) -> Option<SftExample> {
    let prompt = prompt_tokens(vocab, paper, max_context);
    let mut seq = prompt.clone();
    seq.extend(vocab.encode(&idea.full_text()));
    seq.push(EOS);
    if seq.len() - 1 > context_len {
        return None;
    }
    let inputs = seq[..seq.len() - 1].to_vec();
    let targets = (1..seq.len())
        .map(|i| (i >= prompt.len()).then_some(seq[i]))
        .collect();
    Some(SftExample { inputs, targets })
}

/// Losses and perplexities of one SFT run.
#[derive(Clone, Debug, PartialEq)]
pub struct SftReport {
    pub initial_loss: f64,
    /// Running mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Training loss after the last epoch.
    pub final_loss: f64,
    pub heldout_perplexity: Option<f64>,
    pub unigram_perplexity: Option<f64>,
    pub train_count: usize,
    pub heldout_count: usize,
    pub optimizer: Momentum,
}

impl SftReport {
    /// `epoch,loss` rows; epoch 0 is the loss before training.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "loss"])?;
        w.write_record(["0".to_string(), format!("{}", self.initial_loss)])?;
        for (i, l) in self.epoch_losses.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{l}")])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// `metric,value` rows of the end-of-run numbers; perplexities are empty without a
    /// held-out set.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "value"])?;
        for (k, v) in [
            ("initial_loss", self.initial_loss.to_string()),
            ("final_loss", self.final_loss.to_string()),
            ("heldout_perplexity", opt(self.heldout_perplexity)),
            ("unigram_perplexity", opt(self.unigram_perplexity)),
            ("train_count", self.train_count.to_string()),
            ("heldout_count", self.heldout_count.to_string()),
        ] {
            w.write_record([k, v.as_str()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Token-weighted mean cross-entropy over `examples`.
pub fn mean_ce(model: &Proposer, examples: &[SftExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for ex in examples {
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, false);
        let f = model.forward_tape(&mut tape, &vars, &ex.inputs, None)?;
        let l = tape.cross_entropy(f.logits, &ex.targets)?;
        let n = ex.target_count();
        total += tape.scalar(l) * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Empty("no target tokens".into()));
    }
    Ok(total / count as f64)
}

/// Perplexity of an add-one-smoothed unigram model fitted on `train` targets.
pub fn unigram_perplexity(vocab_size: usize, train: &[SftExample], heldout: &[SftExample]) -> Result<f64> {
    let mut counts = vec![1.0; vocab_size];
    let mut total = vocab_size as f64;
    for t in train.iter().flat_map(|e| e.targets.iter().flatten()) {
        counts[*t] += 1.0;
        total += 1.0;
    }
    let mut nll = 0.0;
    let mut n = 0;
    for t in heldout.iter().flat_map(|e| e.targets.iter().flatten()) {
        nll -= (counts[*t] / total).ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("held-out set has no target tokens".into()));
    }
    Ok((nll / n as f64).exp())
}

fn batch_step(model: &Proposer, batch: &[&SftExample]) -> Result<(f64, Vec<ndarray::Array2<f64>>)> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, true);
    let total: usize = batch.iter().map(|e| e.target_count()).sum();
    let mut acc = None;
    for ex in batch {
        let f = model.forward_tape(&mut tape, &vars, &ex.inputs, None)?;
        let l = tape.cross_entropy(f.logits, &ex.targets)?;
        let l = tape.scale(l, ex.target_count() as f64 / total as f64);
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    let loss = acc.ok_or_else(|| Error::Empty("sft batch".into()))?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Divergence(format!("sft loss is {value}")));
    }
    let grads = tape.backward(loss);
    Ok((value, model.params.collect_grads(&grads, &vars)))
}

/// Fine-tunes `model` on `pairs`. A held-out fraction is set aside by a seeded shuffle
/// (none when there is a single pair).
pub fn train_sft(model: &mut Proposer, pairs: &[(PaperRecord, IdeaRecord)], cfg: &SftConfig) -> Result<SftReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("no SFT pairs".into()));
    }
    let mut examples: Vec<SftExample> = pairs
        .iter()
        .filter_map(|(p, i)| encode_pair(&model.vocab, p, i, cfg.max_context, model.config.context_len))
        .collect();
    if examples.is_empty() {
        return Err(Error::TooLong {
            len: usize::MAX,
            max: model.config.context_len,
        });
    }
    examples.shuffle(&mut rng_from(&[cfg.seed, 0x5f7]));
    let n_eval = if examples.len() < 2 {
        0
    } else {
        ((examples.len() as f64 * cfg.eval_fraction).round() as usize).clamp(1, examples.len() - 1)
    };
    let heldout = examples.split_off(examples.len() - n_eval);
    let train = examples;

    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut opt = Momentum::new(&model.params, cfg.lr, cfg.momentum, cfg.epochs * batches_per_epoch);
    let initial_loss = mean_ce(model, &train)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_from(&[cfg.seed, epoch as u64]));
        let mut sum = 0.0;
        let mut tokens = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SftExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = batch_step(model, &batch)?;
            let n: usize = batch.iter().map(|e| e.target_count()).sum();
            sum += loss * n as f64;
            tokens += n;
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.update(&mut model.params, &grads);
        }
        epoch_losses.push(sum / tokens as f64);
    }
    let final_loss = if cfg.epochs == 0 { initial_loss } else { mean_ce(model, &train)? };
    if !final_loss.is_finite() {
        return Err(Error::Divergence(format!("sft loss is {final_loss}")));
    }
    let (heldout_perplexity, unigram) = if heldout.is_empty() {
        (None, None)
    } else {
        (
            Some(mean_ce(model, &heldout)?.exp()),
            Some(unigram_perplexity(model.config.vocab_size, &train, &heldout)?),
        )
    };
    Ok(SftReport {
        initial_loss,
        epoch_losses,
        final_loss,
        heldout_perplexity,
        unigram_perplexity: unigram,
        train_count: train.len(),
        heldout_count: heldout.len(),
        optimizer: opt,
    })
}

/// Checkpoint of a fine-tuned model together with its optimizer moments.
pub fn save_sft(model: &Proposer, optimizer: &Momentum, path: &Path) -> Result<()> {
    let mut ck = model.to_checkpoint();
    ck.set("optimizer", serde_json::json!({
        "kind": "momentum",
        "lr": optimizer.lr,
        "beta": optimizer.beta,
        "step": optimizer.step,
        "total_steps": optimizer.total_steps,
    }));
    ck.add_params("optim", &optimizer.velocity);
    ck.save(path)
}
