//! Static decoding with fixed gains and dynamic decoding in which a recurrent predictor
//! picks the control vector of every sentence.
//!
//! Both paths share one generation loop: one uniform draw per token from a ChaCha stream
//! seeded by the decode seed, and a steering hook that may change at sentence boundaries.
//! The hook for sentence `t` is already active when the token closing sentence `t − 1` is
//! fed back, so the first token of sentence `t` is drawn under `cv^t`.

use std::path::Path;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::{ParamSet, Tape, Var};
use crate::checkpoint::{params_digest, Checkpoint};
use crate::corpus::{IdeaRecord, PaperRecord};
use crate::error::{Error, Result};
use crate::model::vocab::EOS;
use crate::model::{draw_token, Proposer, SampleOptions};
use crate::optim::{clip_global_norm, Adam};
use crate::reward::{score_token_sentences, RewardSet};
use crate::rng::rng_from;
use crate::sft::prompt_tokens;
use crate::steer::{make_hook, AdapterSet, ControlVector};

pub const DEFAULT_EPS_MAX: f64 = 5.0;
pub const DEFAULT_BINS: usize = 51;
pub const MAX_SENTENCES: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Extracted,
    Predicted,
    Constant,
}

/// One control vector per sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSchedule {
    pub steps: Vec<ControlVector>,
    pub eps_max: f64,
    pub provenance: Provenance,
}

const SCHEDULE_HEADER: [&str; 4] = ["sentence", "eps_n", "eps_f", "eps_e"];

impl ControlSchedule {
    pub fn new(steps: Vec<ControlVector>, eps_max: f64, provenance: Provenance) -> Result<Self> {
        let s = Self {
            steps,
            eps_max,
            provenance,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_max > 0.0 && self.eps_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps_max {}", self.eps_max)));
        }
        if self.steps.is_empty() {
            return Err(Error::Empty("control schedule".into()));
        }
        self.steps.iter().try_for_each(|cv| cv.validate(self.eps_max))
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// CSV with a 1-based sentence index and the three gains.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(SCHEDULE_HEADER)?;
        for (i, cv) in self.steps.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                cv.n.to_string(),
                cv.f.to_string(),
                cv.e.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 csv"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, eps_max: f64, provenance: Provenance) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut steps = Vec::new();
        for (i, row) in r.deserialize::<(usize, f64, f64, f64)>().enumerate() {
            let (k, n, f, e) = row?;
            if k != i + 1 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 2,
                    msg: format!("sentence index {k}, expected {}", i + 1),
                });
            }
            steps.push(ControlVector::new(n, f, e));
        }
        Self::new(steps, eps_max, provenance)
    }
}

/// Sampling settings for both decoding modes.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOptions {
    pub sample: SampleOptions,
    /// Paper tokens placed in the prompt.
    pub max_context: usize,
    pub max_sentences: usize,
    pub eps_max: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            sample: SampleOptions::default(),
            max_context: 16,
            max_sentences: MAX_SENTENCES,
            eps_max: DEFAULT_EPS_MAX,
        }
    }
}

/// A decoded idea with its token-level sentences and the schedule it was generated under.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub idea: IdeaRecord,
    /// Generated tokens, including a closing EOS when one was drawn.
    pub tokens: Vec<usize>,
    pub sentences: Vec<Vec<usize>>,
    pub schedule: ControlSchedule,
    pub ended_with_eos: bool,
    /// Generation stopped at the sentence cap.
    pub truncated: bool,
}

fn generate(
    model: &Proposer,
    adapters: &AdapterSet,
    paper: &PaperRecord,
    seed: u64,
    opts: &DecodeOptions,
    provenance: Provenance,
    mut next_cv: impl FnMut(Option<&[usize]>) -> Result<ControlVector>,
) -> Result<Decoded> {
    if opts.max_sentences == 0 {
        return Err(Error::InvalidArgument("max_sentences must be positive".into()));
    }
    if !(opts.sample.temperature >= 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {}", opts.sample.temperature)));
    }
    let prompt = prompt_tokens(&model.vocab, paper, opts.max_context);
    model.check_tokens(&prompt)?;
    let mut cv = next_cv(None)?;
    cv.validate(opts.eps_max)?;
    let mut steps = vec![cv];
    let mut hook = make_hook(adapters, cv);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut session = model.session();
    let mut logits = Array1::zeros(0);
    for &t in &prompt {
        logits = session.step(t, Some(&hook))?;
    }
    let budget = opts.sample.max_len.min(model.config.context_len - prompt.len());
    let mut tokens = Vec::new();
    let mut sentences: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut ended_with_eos = false;
    let mut truncated = false;
    while tokens.len() < budget {
        let (tok, _) = draw_token(logits.as_slice().expect("row"), opts.sample.temperature, rng.gen());
        tokens.push(tok);
        if tok == EOS {
            ended_with_eos = true;
            break;
        }
        current.push(tok);
        if tokens.len() == budget {
            break;
        }
        if model.vocab.is_boundary(tok) {
            sentences.push(std::mem::take(&mut current));
            if sentences.len() == opts.max_sentences {
                truncated = true;
                break;
            }
            cv = next_cv(sentences.last().map(Vec::as_slice))?;
            cv.validate(opts.eps_max)?;
            steps.push(cv);
            hook = make_hook(adapters, cv);
        }
        logits = session.step(tok, Some(&hook))?;
    }
    if !current.is_empty() || sentences.is_empty() {
        sentences.push(current);
    }
    // A gain chosen for a sentence that never produced a token is dropped.
    steps.truncate(sentences.len());
    let text = model.vocab.decode(&tokens);
    let idea = IdeaRecord {
        id: format!("gen-{}-{seed:016x}", paper.id),
        source_paper_id: paper.id.clone(),
        method_text: text,
        experiment_plan_text: String::new(),
        sentences: sentences.iter().map(|s| model.vocab.decode(s)).collect(),
    };
    Ok(Decoded {
        idea,
        tokens,
        sentences,
        schedule: ControlSchedule::new(steps, opts.eps_max, provenance)?,
        ended_with_eos,
        truncated,
    })
}

/// Generates an idea for `paper` with `cv` held fixed for the whole sequence.
pub fn static_decode(
    model: &Proposer,
    adapters: &AdapterSet,
    paper: &PaperRecord,
    cv: ControlVector,
    seed: u64,
    opts: &DecodeOptions,
) -> Result<Decoded> {
    generate(model, adapters, paper, seed, opts, Provenance::Constant, |_| Ok(cv))
}

/// Generates an idea for `paper`, asking `predictor` for a control vector before every
/// sentence.
pub fn dynamic_decode(
    model: &Proposer,
    adapters: &AdapterSet,
    predictor: &WeightPredictor,
    paper: &PaperRecord,
    seed: u64,
    opts: &DecodeOptions,
) -> Result<Decoded> {
    if predictor.config.eps_max != opts.eps_max {
        return Err(Error::InvalidArgument(format!(
            "predictor eps_max {} differs from decode eps_max {}",
            predictor.config.eps_max, opts.eps_max
        )));
    }
    let mut state = predictor.start();
    let provenance = if predictor.frozen.is_some() {
        Provenance::Constant
    } else {
        Provenance::Predicted
    };
    generate(model, adapters, paper, seed, opts, provenance, |prev| predictor.next(&mut state, prev))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// One reward range pooled over all three dimensions.
    Global,
    PerDimension,
}

/// Affine map from sentence rewards to gains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleScale {
    pub r_min: [f64; 3],
    pub r_max: [f64; 3],
    pub eps_max: f64,
}

impl ScheduleScale {
    /// Reward range of an extraction dataset given as per-sentence scores of each idea.
    pub fn fit(scores: &[Vec<[f64; 3]>], eps_max: f64, norm: Normalization) -> Result<Self> {
        if !(eps_max > 0.0 && eps_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps_max {eps_max}")));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for s in scores.iter().flatten() {
            for d in 0..3 {
                if !s[d].is_finite() {
                    return Err(Error::InvalidArgument(format!("reward {}", s[d])));
                }
                lo[d] = lo[d].min(s[d]);
                hi[d] = hi[d].max(s[d]);
            }
        }
        if lo[0].is_infinite() {
            return Err(Error::Empty("extraction dataset".into()));
        }
        if norm == Normalization::Global {
            let (l, h) = (lo.iter().cloned().fold(f64::INFINITY, f64::min), hi.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            lo = [l; 3];
            hi = [h; 3];
        }
        Ok(Self {
            r_min: lo,
            r_max: hi,
            eps_max,
        })
    }

    pub fn gain(&self, dim: usize, r: f64) -> f64 {
        let (lo, hi) = (self.r_min[dim], self.r_max[dim]);
        if hi == lo {
            return self.eps_max / 2.0;
        }
        ((r - lo) / (hi - lo) * self.eps_max).clamp(0.0, self.eps_max)
    }

    pub fn schedule(&self, scores: &[[f64; 3]]) -> Result<ControlSchedule> {
        let steps = scores
            .iter()
            .map(|s| ControlVector::new(self.gain(0, s[0]), self.gain(1, s[1]), self.gain(2, s[2])))
            .collect();
        ControlSchedule::new(steps, self.eps_max, Provenance::Extracted)
    }
}

/// Schedule of an idea from its per-sentence reward scores.
pub fn extract_schedule(
    models: &RewardSet,
    paper: Option<&PaperRecord>,
    idea: &IdeaRecord,
    scale: &ScheduleScale,
) -> Result<ControlSchedule> {
    scale.schedule(&crate::reward::score_sentences(models, paper, idea)?)
}

/// A generated idea with its reward scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredIdea {
    pub idea_id: String,
    pub sentences: Vec<Vec<usize>>,
    pub sentence_scores: Vec<[f64; 3]>,
    /// Mean of the three idea-level scores.
    pub overall: f64,
}

/// Scores a decoded idea sentence by sentence and as a whole.
pub fn score_decoded(models: &RewardSet, paper: &PaperRecord, decoded: &Decoded) -> Result<ScoredIdea> {
    let vocab = &models.get(crate::corpus::Dimension::Novelty)?.vocab;
    let ctx = vocab.paper_context(paper, usize::MAX);
    let body: Vec<usize> = decoded.sentences.concat();
    let whole = models.score_all(&ctx, &body)?;
    Ok(ScoredIdea {
        idea_id: decoded.idea.id.clone(),
        sentences: decoded.sentences.clone(),
        sentence_scores: score_token_sentences(models, &ctx, &decoded.sentences)?,
        overall: whole.iter().sum::<f64>() / 3.0,
    })
}

/// Teacher-forced predictor example: the sentences before position `t`, the gains of
/// those sentences, and the gains of sentence `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorPair {
    pub idea_id: String,
    /// 1-based sentence position of the target.
    pub position: usize,
    pub prefix: Vec<Vec<usize>>,
    pub prefix_gains: Vec<ControlVector>,
    pub target: ControlVector,
}

/// Pairs from one idea and its schedule, one per sentence.
pub fn schedule_pairs(idea_id: &str, sentences: &[Vec<usize>], schedule: &ControlSchedule) -> Result<Vec<PredictorPair>> {
    if sentences.len() != schedule.len() {
        return Err(Error::Shape(format!(
            "{} sentences but {} schedule entries",
            sentences.len(),
            schedule.len()
        )));
    }
    Ok((0..sentences.len())
        .map(|t| PredictorPair {
            idea_id: idea_id.to_string(),
            position: t + 1,
            prefix: sentences[..t].to_vec(),
            prefix_gains: schedule.steps[..t].to_vec(),
            target: schedule.steps[t],
        })
        .collect())
}

/// Keeps ideas whose overall score exceeds `threshold` and turns each into one pair per
/// sentence, with targets from [`ScheduleScale::schedule`].
pub fn build_predictor_dataset(ideas: &[ScoredIdea], scale: &ScheduleScale, threshold: f64) -> Result<Vec<PredictorPair>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("overall threshold {threshold} outside [0, 1]")));
    }
    let mut pairs = Vec::new();
    for idea in ideas.iter().filter(|i| i.overall > threshold) {
        let schedule = scale.schedule(&idea.sentence_scores)?;
        pairs.extend(schedule_pairs(&idea.idea_id, &idea.sentences, &schedule)?);
    }
    if pairs.is_empty() {
        return Err(Error::Empty(format!("no idea scores above {threshold}")));
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub embed: usize,
    pub hidden: usize,
    pub bins: usize,
    pub eps_max: f64,
    pub vocab_size: usize,
    pub seed: u64,
}

impl PredictorConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            embed: 16,
            hidden: 32,
            bins: DEFAULT_BINS,
            eps_max: DEFAULT_EPS_MAX,
            vocab_size,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 || self.embed == 0 || self.hidden == 0 || self.vocab_size == 0 {
            return Err(Error::InvalidArgument(format!("predictor config {self:?}")));
        }
        if !(self.eps_max > 0.0 && self.eps_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps_max {}", self.eps_max)));
        }
        Ok(())
    }
}

const EMB: usize = 0;
const W_IN: usize = 1;
const W_HH: usize = 2;
const B_H: usize = 3;
const W_OUT: usize = 4;
const B_OUT: usize = 5;
const EPS0: usize = 6;

/// Elman RNN over sentences. Its input at step `t` is the mean token embedding of
/// sentence `t − 1` next to `cv^{t−1} / ε_max`; at `t = 1` the embedding part is zero and
/// the gain part is the learned `ε⁰`. Each dimension has its own softmax over `bins`
/// gain values `k·ε_max/(bins − 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightPredictor {
    pub config: PredictorConfig,
    pub params: ParamSet,
    /// Fixed output that replaces the network.
    pub frozen: Option<ControlVector>,
}

/// Hidden state of one decoding session.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorState {
    h: Array2<f64>,
    prev: Option<ControlVector>,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || n.sample(rng))
}

impl WeightPredictor {
    pub fn new(config: PredictorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(&[config.seed, 0x9e1d]);
        let (e, h, k) = (config.embed, config.hidden, config.bins);
        let mut params = ParamSet::new();
        params.push("emb", normal(&mut rng, config.vocab_size, e, 0.3));
        params.push("w_in", normal(&mut rng, e + 3, h, 1.0 / ((e + 3) as f64).sqrt()));
        params.push("w_hh", normal(&mut rng, h, h, 0.5 / (h as f64).sqrt()));
        params.push("b_h", Array2::zeros((1, h)));
        params.push("w_out", normal(&mut rng, h, 3 * k, 1.0 / (h as f64).sqrt()));
        params.push("b_out", Array2::zeros((1, 3 * k)));
        params.push("eps0", Array2::ones((1, 3)));
        Ok(Self {
            config,
            params,
            frozen: None,
        })
    }

    /// A predictor that always emits `cv`.
    pub fn constant(cv: ControlVector, config: PredictorConfig) -> Result<Self> {
        cv.validate(config.eps_max)?;
        let mut p = Self::new(config)?;
        p.frozen = Some(cv);
        Ok(p)
    }

    /// Sets the output layer to zero, giving a uniform distribution over bins.
    pub fn zero_output(&mut self) {
        self.params.get_mut(W_OUT).fill(0.0);
        self.params.get_mut(B_OUT).fill(0.0);
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        k as f64 * self.config.eps_max / (self.config.bins - 1) as f64
    }

    /// Nearest bin of a gain.
    pub fn bin_of(&self, gain: f64) -> usize {
        let k = (gain / self.config.eps_max * (self.config.bins - 1) as f64).round();
        (k.max(0.0) as usize).min(self.config.bins - 1)
    }

    pub fn start(&self) -> PredictorState {
        PredictorState {
            h: Array2::zeros((1, self.config.hidden)),
            prev: None,
        }
    }

    fn input(&self, prev_sentence: Option<&[usize]>, prev: Option<ControlVector>) -> Result<Array2<f64>> {
        let e = self.config.embed;
        let summary = match prev_sentence.filter(|s| !s.is_empty()) {
            Some(s) => {
                let emb = self.params.get(EMB);
                let mut acc = Array1::<f64>::zeros(e);
                for &t in s {
                    self.check_token(t)?;
                    acc += &emb.row(t);
                }
                acc / s.len() as f64
            }
            None => Array1::zeros(e),
        };
        let gains = match prev {
            Some(cv) => Array1::from(cv.as_array().to_vec()),
            None => self.params.get(EPS0).row(0).to_owned(),
        } / self.config.eps_max;
        Ok(concatenate![Axis(0), summary, gains].insert_axis(Axis(0)))
    }

    fn check_token(&self, t: usize) -> Result<()> {
        if t >= self.config.vocab_size {
            return Err(Error::OutOfVocab {
                id: t as u32,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Advances the hidden state and returns bin logits, one row per dimension.
    fn advance(&self, state: &mut PredictorState, prev_sentence: Option<&[usize]>) -> Result<Array2<f64>> {
        let p = &self.params;
        let x = self.input(prev_sentence, state.prev)?;
        let pre = x.dot(p.get(W_IN)) + state.h.dot(p.get(W_HH)) + p.get(B_H);
        state.h = pre.mapv(f64::tanh);
        let out = state.h.dot(p.get(W_OUT)) + p.get(B_OUT);
        let k = self.config.bins;
        Ok(out.into_shape_with_order((3, k)).expect("3 x bins"))
    }

    /// Control vector of the next sentence given the sentence just finished (`None`
    /// before the first sentence). Each gain is the center of the most probable bin.
    pub fn next(&self, state: &mut PredictorState, prev_sentence: Option<&[usize]>) -> Result<ControlVector> {
        let cv = match self.frozen {
            Some(cv) => cv,
            None => {
                let logits = self.advance(state, prev_sentence)?;
                let mut g = [0.0; 3];
                for (d, row) in logits.rows().into_iter().enumerate() {
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    g[d] = self.bin_center(best);
                }
                ControlVector::from_array(g)
            }
        };
        state.prev = Some(cv);
        Ok(cv)
    }

    /// Summed per-dimension bin cross-entropy of `pair`, recorded on `tape`.
    pub fn pair_loss_tape(&self, tape: &mut Tape, vars: &[Var], pair: &PredictorPair) -> Result<Var> {
        if pair.prefix.len() != pair.prefix_gains.len() || pair.position != pair.prefix.len() + 1 {
            return Err(Error::Shape(format!("predictor pair at position {}", pair.position)));
        }
        let (e, k) = (self.config.embed, self.config.bins);
        let inv = 1.0 / self.config.eps_max;
        let mut h = tape.constant(Array2::zeros((1, self.config.hidden)));
        for t in 0..=pair.prefix.len() {
            let (summary, gains) = if t == 0 {
                let z = tape.constant(Array2::zeros((1, e)));
                (z, tape.scale(vars[EPS0], inv))
            } else {
                let s = &pair.prefix[t - 1];
                let summary = if s.is_empty() {
                    tape.constant(Array2::zeros((1, e)))
                } else {
                    s.iter().try_for_each(|&tok| self.check_token(tok))?;
                    let rows = tape.gather(vars[EMB], s)?;
                    tape.mean_rows(rows)
                };
                let g = pair.prefix_gains[t - 1].as_array();
                let gv = tape.constant(Array2::from_shape_fn((1, 3), |(_, j)| g[j] * inv));
                (summary, gv)
            };
            let x = tape.concat_cols(&[summary, gains])?;
            let a = tape.matmul(x, vars[W_IN])?;
            let b = tape.matmul(h, vars[W_HH])?;
            let pre = tape.add(a, b)?;
            let pre = tape.add_row(pre, vars[B_H])?;
            h = tape.tanh(pre);
        }
        let out = tape.matmul(h, vars[W_OUT])?;
        let out = tape.add_row(out, vars[B_OUT])?;
        let target = pair.target.as_array();
        let mut total: Option<Var> = None;
        for d in 0..3 {
            let logits = tape.slice_cols(out, d * k, k)?;
            let ce = tape.cross_entropy(logits, &[Some(self.bin_of(target[d]))])?;
            total = Some(match total {
                Some(t) => tape.add(t, ce)?,
                None => ce,
            });
        }
        Ok(total.expect("three dimensions"))
    }

    /// Mean of [`Self::pair_loss_tape`] over `pairs`.
    pub fn loss_tape(&self, tape: &mut Tape, vars: &[Var], pairs: &[&PredictorPair]) -> Result<Var> {
        if pairs.is_empty() {
            return Err(Error::Empty("predictor pairs".into()));
        }
        let mut total: Option<Var> = None;
        for p in pairs {
            let l = self.pair_loss_tape(tape, vars, p)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        Ok(tape.scale(total.expect("non-empty"), 1.0 / pairs.len() as f64))
    }

    pub fn mean_loss(&self, pairs: &[PredictorPair]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let refs: Vec<&PredictorPair> = pairs.iter().collect();
        let l = self.loss_tape(&mut tape, &vars, &refs)?;
        Ok(tape.scalar(l))
    }

    /// Most probable control vector after teacher-forcing the prefix of `pair`.
    pub fn predict_pair(&self, pair: &PredictorPair) -> Result<ControlVector> {
        let mut state = self.start();
        let mut cv = self.next(&mut state, None)?;
        for (s, g) in pair.prefix.iter().zip(&pair.prefix_gains) {
            state.prev = Some(*g);
            cv = self.next(&mut state, Some(s))?;
        }
        Ok(cv)
    }

    pub fn digest(&self) -> String {
        params_digest(&self.params)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set("kind", Value::from("predictor"));
        ck.set("predictor", serde_json::to_value(&self.config).expect("config"));
        if let Some(cv) = self.frozen {
            ck.set("constant", Value::from(cv.as_array().to_vec()));
        }
        ck.add_params("predictor", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, origin: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            msg,
        };
        let config: PredictorConfig =
            serde_json::from_value(ck.get("predictor").cloned().ok_or_else(|| fail("no predictor config".into()))?)
                .map_err(|e| fail(format!("predictor config: {e}")))?;
        let mut p = Self::new(config)?;
        let params = ck.params("predictor");
        if params.names() != p.params.names()
            || params.values().iter().zip(p.params.values()).any(|(a, b)| a.dim() != b.dim())
        {
            return Err(fail("predictor parameters do not match the configuration".into()));
        }
        p.params = params;
        if let Some(c) = ck.get("constant") {
            let a: [f64; 3] = serde_json::from_value(c.clone()).map_err(|e| fail(format!("constant: {e}")))?;
            let cv = ControlVector::from_array(a);
            cv.validate(p.config.eps_max)?;
            p.frozen = Some(cv);
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 1e-2,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// Mean loss before training and after each epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorTrace {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Trains a fresh predictor on `pairs` with Adam.
pub fn train_predictor(
    pairs: &[PredictorPair],
    config: PredictorConfig,
    cfg: &PredictorTrainConfig,
) -> Result<(WeightPredictor, PredictorTrace)> {
    if pairs.is_empty() {
        return Err(Error::Empty("predictor pairs".into()));
    }
    let mut model = WeightPredictor::new(config)?;
    let initial_loss = model.mean_loss(pairs)?;
    let mut opt = Adam::new(&model.params, cfg.lr);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_from(&[cfg.seed, 0x51ed, epoch as u64]));
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&PredictorPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape, true);
            let loss = model.loss_tape(&mut tape, &vars, &batch)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence(format!("predictor loss is {value}")));
            }
            sum += value * batch.len() as f64;
            let grads = tape.backward(loss);
            let mut g = model.params.collect_grads(&grads, &vars);
            clip_global_norm(&mut g, cfg.clip_norm);
            opt.update(&mut model.params, &g);
        }
        epoch_losses.push(sum / pairs.len() as f64);
    }
    Ok((
        model,
        PredictorTrace {
            initial_loss,
            epoch_losses,
        },
    ))
}
