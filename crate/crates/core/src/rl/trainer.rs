//! Algorithm loop: steered rollouts per dimension, terminal rewards, GAE, clipped
//! surrogate updates of the steering adapters and squared-error value updates.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::returns::{assign_terminal_reward, gae, value_targets};
use crate::autograd::{ParamSet, Tape, Var};
use crate::checkpoint::{params_digest, Checkpoint};
use crate::corpus::{Dimension, PaperRecord};
use crate::error::{Error, Result};
use crate::model::vocab::EOS;
use crate::model::{Proposer, SampleOptions};
use crate::optim::{clip_global_norm, Adam};
use crate::reward::RewardSet;
use crate::rng::{derive_seed, text_code};
use crate::sft::prompt_tokens;
use crate::steer::{make_hook, AdapterSet, ControlVector, TapeHook};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardSign {
    /// Rewards are maximized as given.
    Maximize,
    /// Rewards enter with a leading minus sign.
    Negate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    /// Inner PPO iterations per batch.
    pub inner_iters: usize,
    /// Outer steps.
    pub steps: usize,
    /// Prompts per outer step; each is rolled out once per trained dimension.
    pub batch_size: usize,
    pub reward_weight: f64,
    pub reward_sign: RewardSign,
    /// Weight of the KL-to-reference penalty; 0 disables it.
    pub kl_coef: f64,
    /// Batches whose mean KL estimate exceeds this stop their inner loop, and the update
    /// that crossed it is undone. Only enforced when `kl_coef > 0`.
    pub kl_ceiling: f64,
    /// Batches whose mean `|ratio − 1|` exceeds this stop their inner loop.
    pub divergence_bound: f64,
    pub lr: f64,
    pub value_lr: f64,
    pub trunk_lr: f64,
    pub clip_norm: f64,
    pub temperature: f64,
    pub max_len: usize,
    /// Paper tokens in each prompt.
    pub max_context: usize,
    pub normalize_advantages: bool,
    /// Update the proposer's own weights together with the adapters.
    pub train_trunk: bool,
    pub dimensions: Vec<Dimension>,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 0.95,
            clip: 0.2,
            inner_iters: 4,
            steps: 30,
            batch_size: 16,
            reward_weight: 1.0,
            reward_sign: RewardSign::Maximize,
            kl_coef: 0.02,
            kl_ceiling: 1.0,
            divergence_bound: 1.0,
            lr: 3e-4,
            value_lr: 1e-2,
            trunk_lr: 1e-4,
            clip_norm: 1.0,
            temperature: 1.0,
            max_len: 256,
            max_context: 16,
            normalize_advantages: true,
            train_trunk: false,
            dimensions: Dimension::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("ppo config: {m}")));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("gamma {} / lambda {} outside [0, 1]", self.gamma, self.lambda));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip radius {}", self.clip));
        }
        if !(self.reward_weight > 0.0) {
            return bad(format!("reward weight {}", self.reward_weight));
        }
        if !(self.kl_coef >= 0.0) {
            return bad(format!("kl coefficient {}", self.kl_coef));
        }
        if self.batch_size == 0 || self.dimensions.is_empty() {
            return bad("empty batch".into());
        }
        if !(self.temperature >= 0.0) {
            return bad(format!("temperature {}", self.temperature));
        }
        Ok(())
    }
}

/// Linear value heads `V(h) = h·w + b`, one per dimension, with lagging copies.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueHeads {
    pub heads: Vec<ParamSet>,
    pub lagging: Vec<ParamSet>,
}

fn linear_value(p: &ParamSet, features: &Array2<f64>) -> Vec<f64> {
    (features.dot(p.get(0)) + p.get(1)).column(0).to_vec()
}

impl ValueHeads {
    pub fn zeros(width: usize) -> Self {
        let heads: Vec<ParamSet> = (0..3)
            .map(|_| {
                let mut p = ParamSet::new();
                p.push("w", Array2::zeros((width, 1)));
                p.push("b", Array2::zeros((1, 1)));
                p
            })
            .collect();
        Self {
            lagging: heads.clone(),
            heads,
        }
    }

    pub fn value(&self, dim: Dimension, features: &Array2<f64>) -> Vec<f64> {
        linear_value(&self.heads[dim.index()], features)
    }

    pub fn value_old(&self, dim: Dimension, features: &Array2<f64>) -> Vec<f64> {
        linear_value(&self.lagging[dim.index()], features)
    }

    /// Copies the current heads into the lagging copies.
    pub fn sync(&mut self) {
        self.lagging = self.heads.clone();
    }
}

/// One sampled generation and everything PPO derives from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub prompt_id: String,
    pub prompt: Vec<usize>,
    pub tokens: Vec<usize>,
    pub dimension: Dimension,
    pub old_logprobs: Vec<f64>,
    /// Log-probabilities of the emitted tokens under the unsteered reference policy.
    pub ref_logprobs: Vec<f64>,
    pub values: Vec<f64>,
    /// Terminal reward `r_d` of the trajectory's own dimension.
    pub reward: f64,
    /// Scores of the generation under all three reward models.
    pub scores: [f64; 3],
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
    pub ended_with_eos: bool,
    /// Pre-hook residual stream at the first steered layer, all sequence rows.
    pub trunk: Array2<f64>,
    /// Final hidden state of states `s_0 … s_{K−1}`.
    pub features: Array2<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Generated idea tokens without the closing EOS.
    pub fn idea_tokens(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// One row of the per-step trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlStepRecord {
    pub step: usize,
    /// Mean `r_d` over the trajectories rolled out for dimension d (NaN when not trained).
    pub reward_n: f64,
    pub reward_f: f64,
    pub reward_e: f64,
    /// Mean score of each dimension over every trajectory of the step.
    pub score_n: f64,
    pub score_f: f64,
    pub score_e: f64,
    pub surrogate: f64,
    /// Per-token KL estimate to the reference on the fresh batch, before updating.
    pub kl: f64,
    /// The same estimate at the parameters kept after updating.
    pub kl_after: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
    pub mean_length: f64,
    pub inner_iters_run: usize,
    pub aborted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlReport {
    pub trace: Vec<RlStepRecord>,
    pub reward_digest: String,
    /// Largest `kl_after` of any trained dimension over the run.
    pub max_kl: f64,
}

impl RlReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.trace {
            w.serialize(r)?;
        }
        if self.trace.is_empty() {
            w.write_record([
                "step", "reward_n", "reward_f", "reward_e", "score_n", "score_f", "score_e", "surrogate", "kl",
                "kl_after", "clip_fraction", "value_loss", "mean_length", "inner_iters_run", "aborted",
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Mean of `f` over the first and the last `window` steps.
    pub fn window_means(&self, window: usize, f: impl Fn(&RlStepRecord) -> f64) -> Option<(f64, f64)> {
        if self.trace.len() < window || window == 0 {
            return None;
        }
        let mean = |rows: &[RlStepRecord]| rows.iter().map(&f).sum::<f64>() / rows.len() as f64;
        Some((mean(&self.trace[..window]), mean(&self.trace[self.trace.len() - window..])))
    }
}

/// Everything `train_rl` updates.
pub struct Policy {
    pub model: Proposer,
    pub adapters: AdapterSet,
    pub values: ValueHeads,
}

/// Optimizer state carried across outer steps.
pub struct RlOptimizers {
    pub adapters: Vec<Adam>,
    pub values: Vec<Adam>,
    pub trunk: Option<Adam>,
}

impl RlOptimizers {
    pub fn new(policy: &Policy, cfg: &PpoConfig) -> Result<Self> {
        let adapters = Dimension::ALL
            .iter()
            .map(|&d| Ok(Adam::new(&adapter_params(&policy.adapters, d)?, cfg.lr)))
            .collect::<Result<_>>()?;
        let values = policy.values.heads.iter().map(|h| Adam::new(h, cfg.value_lr)).collect();
        let trunk = cfg.train_trunk.then(|| Adam::new(&policy.model.params, cfg.trunk_lr));
        Ok(Self {
            adapters,
            values,
            trunk,
        })
    }
}

fn adapter_params(adapters: &AdapterSet, dim: Dimension) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    p.push("W", adapters.require(dim)?.w.clone());
    Ok(p)
}

fn first_attach(adapters: &AdapterSet, layers: usize) -> Result<usize> {
    for a in &adapters.adapters {
        a.validate(layers)?;
    }
    adapters
        .attach_layers()
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidArgument("steering adapters attach to no layer".into()))
}

/// Samples one trajectory for `dim` and fills in values, rewards and reference logprobs.
pub fn rollout(
    policy: &Policy,
    rewards: &RewardSet,
    paper: &PaperRecord,
    dim: Dimension,
    cfg: &PpoConfig,
    step: usize,
) -> Result<Option<Trajectory>> {
    let model = &policy.model;
    let attach = first_attach(&policy.adapters, model.config.layers)?;
    let prompt = prompt_tokens(&model.vocab, paper, cfg.max_context);
    let hook = make_hook(&policy.adapters, ControlVector::only(dim));
    let seed = derive_seed(&[cfg.seed, step as u64, text_code(&paper.id), dim.index() as u64]);
    let opts = SampleOptions {
        temperature: cfg.temperature,
        max_len: cfg.max_len,
    };
    let gen = model.sample(&prompt, &opts, seed, Some(&hook))?;
    if gen.tokens.is_empty() {
        return Ok(None);
    }
    let p = prompt.len();
    let k = gen.tokens.len();
    let mut seq = prompt.clone();
    seq.extend_from_slice(&gen.tokens);

    let trunk = model.trunk(&seq, attach)?;
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, false);
    let x = tape.constant(trunk.clone());
    let steered = model.forward_from(&mut tape, &vars, attach, x, Some(&hook))?;
    let plain = model.forward_from(&mut tape, &vars, attach, x, None)?;
    let rows = tape.slice_rows(steered.logits, p - 1, k)?;
    let old = tape.token_logprob(rows, &gen.tokens, cfg.temperature)?;
    let ref_rows = tape.slice_rows(plain.logits, p - 1, k)?;
    let reference = tape.token_logprob(ref_rows, &gen.tokens, cfg.temperature)?;
    let hidden = tape.value(steered.hidden);
    let features = hidden.slice(ndarray::s![p - 1..p - 1 + k, ..]).to_owned();
    let last = hidden.slice(ndarray::s![p + k - 1..p + k, ..]).to_owned();

    let values = policy.values.value(dim, &features);
    let (bootstrap, bootstrap_old) = if gen.ended_with_eos {
        (0.0, 0.0)
    } else {
        (policy.values.value(dim, &last)[0], policy.values.value_old(dim, &last)[0])
    };
    let ctx = model.vocab.paper_context(paper, usize::MAX);
    let idea = match gen.tokens.last() {
        Some(&EOS) => &gen.tokens[..k - 1],
        _ => &gen.tokens[..],
    };
    let scores = rewards.score_all(&ctx, idea)?;
    let reward = scores[dim.index()];
    let signed = match cfg.reward_sign {
        RewardSign::Maximize => reward,
        RewardSign::Negate => -reward,
    };
    let per_token = assign_terminal_reward(k, signed, cfg.reward_weight)?;
    let advantages = gae(&per_token, &values, bootstrap, cfg.gamma, cfg.lambda)?;
    let targets = value_targets(&per_token, bootstrap_old, cfg.gamma);
    Ok(Some(Trajectory {
        prompt_id: paper.id.clone(),
        prompt,
        tokens: gen.tokens,
        dimension: dim,
        old_logprobs: tape.value(old).column(0).to_vec(),
        ref_logprobs: tape.value(reference).column(0).to_vec(),
        values,
        reward,
        scores,
        rewards: per_token,
        advantages,
        value_targets: targets,
        ended_with_eos: gen.ended_with_eos,
        trunk,
        features,
    }))
}

fn normalize(advs: &mut [&mut Vec<f64>]) {
    let n: usize = advs.iter().map(|a| a.len()).sum();
    if n < 2 {
        return;
    }
    let mean = advs.iter().flat_map(|a| a.iter()).sum::<f64>() / n as f64;
    let var = advs.iter().flat_map(|a| a.iter()).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt().max(1e-8);
    for a in advs.iter_mut() {
        for v in a.iter_mut() {
            *v = (*v - mean) / std;
        }
    }
}

struct DimStats {
    surrogate: f64,
    kl: f64,
    /// KL estimate on the batch at the parameters kept after the update.
    kl_after: f64,
    clip_fraction: f64,
    iters: usize,
    aborted: bool,
}

/// Halvings of an adapter whose fresh batch already exceeds the KL ceiling.
const MAX_SHRINK: usize = 30;

/// Runs the inner PPO iterations of one dimension's batch.
///
/// An update that pushes the batch KL over the ceiling, or the mean `|ratio − 1|` over the
/// divergence bound, is undone and ends the loop. A batch whose KL is over the ceiling
/// before any update shrinks the adapter toward zero until it is back under.
fn update_dimension(
    policy: &mut Policy,
    opts: &mut RlOptimizers,
    batch: &[Trajectory],
    dim: Dimension,
    cfg: &PpoConfig,
) -> Result<DimStats> {
    let attach = first_attach(&policy.adapters, policy.model.config.layers)?;
    let layers: BTreeSet<usize> = policy.adapters.require(dim)?.attach_layers.clone();
    let mut stats = DimStats {
        surrogate: f64::NAN,
        kl: f64::NAN,
        kl_after: f64::NAN,
        clip_fraction: f64::NAN,
        iters: 0,
        aborted: false,
    };
    // State before the latest update and the KL measured there.
    let mut undo: Option<(Array2<f64>, Adam, Option<(ParamSet, Adam)>, f64)> = None;
    let mut shrinks = 0;
    for pass in 0.. {
        let mut tape = Tape::new();
        let adapter = adapter_params(&policy.adapters, dim)?;
        let w = adapter.bind(&mut tape, true);
        let trunk_vars = policy.model.params.bind(&mut tape, cfg.train_trunk);
        let hook = TapeHook {
            attach_layers: layers.clone(),
            terms: vec![(w[0], 1.0)],
        };
        let mut total: Option<Var> = None;
        let (mut surr_sum, mut kl_sum, mut dev_sum, mut clipped, mut tokens) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for t in batch {
            let p = t.prompt.len();
            let k = t.len();
            let logits = if cfg.train_trunk {
                let mut seq = t.prompt.clone();
                seq.extend_from_slice(&t.tokens);
                policy.model.forward_tape(&mut tape, &trunk_vars, &seq, Some(&hook))?.logits
            } else {
                let x = tape.constant(t.trunk.clone());
                policy.model.forward_from(&mut tape, &trunk_vars, attach, x, Some(&hook))?.logits
            };
            let rows = tape.slice_rows(logits, p - 1, k)?;
            let lp = tape.token_logprob(rows, &t.tokens, cfg.temperature)?;
            let surr = tape.clipped_surrogate(lp, &t.old_logprobs, &t.advantages, cfg.clip)?;
            let mut loss = tape.scale(surr, -1.0);
            let kl = tape.kl_k3(lp, &t.ref_logprobs)?;
            if cfg.kl_coef > 0.0 {
                let pen = tape.scale(kl, cfg.kl_coef);
                loss = tape.add(loss, pen)?;
            }
            for (i, &new) in tape.value(lp).column(0).iter().enumerate() {
                let ratio = (new - t.old_logprobs[i]).exp();
                dev_sum += (ratio - 1.0).abs();
                if (ratio - 1.0).abs() > cfg.clip {
                    clipped += 1;
                }
            }
            tokens += k;
            surr_sum += tape.scalar(surr);
            kl_sum += tape.scalar(kl);
            let loss = tape.scale(loss, 1.0 / batch.len() as f64);
            total = Some(match total {
                Some(a) => tape.add(a, loss)?,
                None => loss,
            });
        }
        let Some(total) = total else { break };
        let value = tape.scalar(total);
        if !value.is_finite() {
            return Err(Error::Divergence(format!("{} policy loss is {value}", dim.name())));
        }
        let mean_kl = kl_sum / batch.len() as f64;
        if pass == 0 {
            stats.surrogate = surr_sum / batch.len() as f64;
            stats.kl = mean_kl;
            stats.clip_fraction = clipped as f64 / tokens as f64;
        }
        stats.kl_after = mean_kl;
        let over_kl = cfg.kl_coef > 0.0 && mean_kl > cfg.kl_ceiling;
        if shrinks > 0 {
            if over_kl && shrinks < MAX_SHRINK {
                policy.adapters.get_mut(dim).expect("adapter").w *= 0.5;
                shrinks += 1;
                continue;
            }
            break;
        }
        if over_kl || dev_sum / tokens as f64 > cfg.divergence_bound {
            stats.aborted = true;
            if let Some((w, adam, trunk, kl)) = undo.take() {
                policy.adapters.get_mut(dim).expect("adapter").w = w;
                opts.adapters[dim.index()] = adam;
                if let (Some((params, trunk_adam)), Some(slot)) = (trunk, opts.trunk.as_mut()) {
                    policy.model.params = params;
                    *slot = trunk_adam;
                }
                stats.iters -= 1;
                stats.kl_after = kl;
            } else if over_kl {
                policy.adapters.get_mut(dim).expect("adapter").w *= 0.5;
                shrinks = 1;
                continue;
            }
            break;
        }
        if stats.iters == cfg.inner_iters {
            break;
        }
        undo = Some((
            adapter.get(0).clone(),
            opts.adapters[dim.index()].clone(),
            opts.trunk.as_ref().map(|a| (policy.model.params.clone(), a.clone())),
            mean_kl,
        ));
        let grads = tape.backward(total);
        let mut g = adapter.collect_grads(&grads, &w);
        clip_global_norm(&mut g, cfg.clip_norm);
        let mut updated = adapter.clone();
        opts.adapters[dim.index()].update(&mut updated, &g);
        policy.adapters.get_mut(dim).expect("adapter").w = updated.get(0).clone();
        policy.adapters.get_mut(dim).expect("adapter").trained = true;
        if let Some(trunk_opt) = opts.trunk.as_mut() {
            let mut tg = policy.model.params.collect_grads(&grads, &trunk_vars);
            clip_global_norm(&mut tg, cfg.clip_norm);
            trunk_opt.update(&mut policy.model.params, &tg);
        }
        stats.iters += 1;
    }
    Ok(stats)
}

fn update_values(policy: &mut Policy, opts: &mut RlOptimizers, batch: &[Trajectory], dim: Dimension, cfg: &PpoConfig) -> Result<f64> {
    let mut first = f64::NAN;
    for iter in 0..cfg.inner_iters {
        let head = &policy.values.heads[dim.index()];
        let mut tape = Tape::new();
        let vars = head.bind(&mut tape, true);
        let mut total: Option<Var> = None;
        for t in batch {
            let f = tape.constant(t.features.clone());
            let v = tape.matmul(f, vars[0])?;
            let v = tape.add_row(v, vars[1])?;
            let target = Array2::from_shape_vec((t.len(), 1), t.value_targets.clone()).expect("column");
            let l = tape.mse(v, target)?;
            let l = tape.scale(l, 1.0 / batch.len() as f64);
            total = Some(match total {
                Some(a) => tape.add(a, l)?,
                None => l,
            });
        }
        let Some(total) = total else { break };
        if iter == 0 {
            first = tape.scalar(total);
        }
        let grads = tape.backward(total);
        let mut g = head.collect_grads(&grads, &vars);
        clip_global_norm(&mut g, cfg.clip_norm);
        opts.values[dim.index()].update(&mut policy.values.heads[dim.index()], &g);
    }
    Ok(first)
}

/// Trains the steering adapters (and optionally the trunk) against frozen reward models.
///
/// Each outer step takes the next `batch_size` prompts in cyclic order and rolls each out
/// once per trained dimension, with gain 1 on that dimension's adapter and 0 on the others.
/// `on_step` sees every finished trace row together with that step's trajectories.
pub fn train_rl(
    policy: &mut Policy,
    opts: &mut RlOptimizers,
    prompts: &[PaperRecord],
    rewards: &RewardSet,
    cfg: &PpoConfig,
    mut on_step: impl FnMut(&RlStepRecord, &[Trajectory]),
) -> Result<RlReport> {
    cfg.validate()?;
    if prompts.is_empty() && cfg.steps > 0 {
        return Err(Error::Empty("no RL prompts".into()));
    }
    let reward_digest = rewards.digest();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut max_kl: f64 = 0.0;
    for step in 0..cfg.steps {
        policy.values.sync();
        let mut batch: Vec<Trajectory> = Vec::new();
        for i in 0..cfg.batch_size {
            let paper = &prompts[(step * cfg.batch_size + i) % prompts.len()];
            for &dim in &cfg.dimensions {
                if let Some(t) = rollout(policy, rewards, paper, dim, cfg, step)? {
                    batch.push(t);
                }
            }
        }
        if cfg.normalize_advantages {
            for &dim in &cfg.dimensions {
                let mut advs: Vec<&mut Vec<f64>> = batch
                    .iter_mut()
                    .filter(|t| t.dimension == dim)
                    .map(|t| &mut t.advantages)
                    .collect();
                normalize(&mut advs);
            }
        }
        let mean_of = |f: &dyn Fn(&Trajectory) -> f64, dim: Option<Dimension>| {
            let sel: Vec<f64> = batch.iter().filter(|t| dim.is_none_or(|d| t.dimension == d)).map(f).collect();
            if sel.is_empty() {
                f64::NAN
            } else {
                sel.iter().sum::<f64>() / sel.len() as f64
            }
        };
        let reward_of = |d: Dimension| mean_of(&|t: &Trajectory| t.reward, Some(d));
        let score_of = |i: usize| mean_of(&|t: &Trajectory| t.scores[i], None);
        let mut rec = RlStepRecord {
            step,
            reward_n: reward_of(Dimension::Novelty),
            reward_f: reward_of(Dimension::Feasibility),
            reward_e: reward_of(Dimension::Effectiveness),
            score_n: score_of(0),
            score_f: score_of(1),
            score_e: score_of(2),
            surrogate: 0.0,
            kl: 0.0,
            kl_after: 0.0,
            clip_fraction: 0.0,
            value_loss: 0.0,
            mean_length: mean_of(&|t: &Trajectory| t.len() as f64, None),
            inner_iters_run: 0,
            aborted: false,
        };
        let mut active = 0.0;
        for &dim in &cfg.dimensions {
            let sub: Vec<Trajectory> = batch.iter().filter(|t| t.dimension == dim).cloned().collect();
            if sub.is_empty() {
                continue;
            }
            let s = update_dimension(policy, opts, &sub, dim, cfg)?;
            rec.value_loss += update_values(policy, opts, &sub, dim, cfg)?;
            rec.surrogate += s.surrogate;
            rec.kl += s.kl;
            rec.kl_after += s.kl_after;
            rec.clip_fraction += s.clip_fraction;
            rec.inner_iters_run += s.iters;
            rec.aborted |= s.aborted;
            max_kl = max_kl.max(s.kl_after);
            active += 1.0;
        }
        if active > 0.0 {
            rec.surrogate /= active;
            rec.kl /= active;
            rec.kl_after /= active;
            rec.clip_fraction /= active;
            rec.value_loss /= active;
        }
        if rewards.digest() != reward_digest {
            return Err(Error::InvalidArgument("reward model parameters changed during RL".into()));
        }
        on_step(&rec, &batch);
        trace.push(rec);
    }
    Ok(RlReport {
        trace,
        reward_digest,
        max_kl,
    })
}

/// Checkpoint holding the proposer, adapters, value heads and Adam moments.
pub fn rl_checkpoint(policy: &Policy, opts: &RlOptimizers, cfg: &PpoConfig) -> Checkpoint {
    let mut ck = policy.model.to_checkpoint();
    ck.set("kind", Value::from("rl"));
    ck.set("ppo", serde_json::to_value(cfg).expect("config"));
    policy.adapters.write_into(&mut ck);
    for d in Dimension::ALL {
        ck.add_params(&format!("value.{}", d.tag()), &policy.values.heads[d.index()]);
        ck.add_params(&format!("value_old.{}", d.tag()), &policy.values.lagging[d.index()]);
        let a = &opts.adapters[d.index()];
        ck.add_params(&format!("optim.steer.{}.m", d.tag()), &a.first);
        ck.add_params(&format!("optim.steer.{}.v", d.tag()), &a.second);
        let v = &opts.values[d.index()];
        ck.add_params(&format!("optim.value.{}.m", d.tag()), &v.first);
        ck.add_params(&format!("optim.value.{}.v", d.tag()), &v.second);
    }
    let steps: Vec<usize> = opts.adapters.iter().map(|a| a.step).collect();
    ck.set("optim_steps", Value::from(steps));
    ck
}

/// Proposer and adapters from an RL checkpoint.
pub fn load_policy(path: &Path) -> Result<(Proposer, AdapterSet)> {
    let ck = Checkpoint::load(path)?;
    Ok((Proposer::from_checkpoint(&ck, path)?, AdapterSet::from_checkpoint(&ck, path)?))
}

/// Digest of the proposer's parameters.
pub fn model_digest(model: &Proposer) -> String {
    params_digest(&model.params)
}
