use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;

use super::vocab::{Vocab, EOS, PAD};
use super::{LayerActivations, ModelConfig, SteerHook};
use crate::autograd::{gelu, log_softmax_rows, normalize_rows, ParamSet, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Parameters per transformer block, in storage order:
/// `ln1.g ln1.b qkv proj ln2.g ln2.b fc1 fc1_b fc2 fc2_b`.
pub(crate) const BLOCK_PARAMS: usize = 10;

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || n.sample(rng))
}

pub(crate) fn init_block(ps: &mut ParamSet, prefix: &str, d: usize, depth: usize, rng: &mut ChaCha8Rng) {
    let resid = 1.0 / (2.0 * depth as f64).sqrt();
    let fan = 1.0 / (d as f64).sqrt();
    ps.push(format!("{prefix}.ln1.g"), Array2::ones((1, d)));
    ps.push(format!("{prefix}.ln1.b"), Array2::zeros((1, d)));
    ps.push(format!("{prefix}.qkv"), normal(rng, d, 3 * d, fan));
    ps.push(format!("{prefix}.proj"), normal(rng, d, d, fan * resid));
    ps.push(format!("{prefix}.ln2.g"), Array2::ones((1, d)));
    ps.push(format!("{prefix}.ln2.b"), Array2::zeros((1, d)));
    ps.push(format!("{prefix}.fc1"), normal(rng, d, 4 * d, fan));
    ps.push(format!("{prefix}.fc1_b"), Array2::zeros((1, 4 * d)));
    ps.push(format!("{prefix}.fc2"), normal(rng, 4 * d, d, 0.5 * fan * resid));
    ps.push(format!("{prefix}.fc2_b"), Array2::zeros((1, d)));
}

/// One pre-LN block: causal multi-head attention then a GELU MLP, both residual.
pub(crate) fn block_tape(tape: &mut Tape, v: &[Var], x: Var, heads: usize) -> Result<Var> {
    let d = tape.value(x).ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let h = tape.layer_norm(x, v[0], v[1])?;
    let qkv = tape.matmul(h, v[2])?;
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let q = tape.slice_cols(qkv, i * dh, dh)?;
        let k = tape.slice_cols(qkv, d + i * dh, dh)?;
        let val = tape.slice_cols(qkv, 2 * d + i * dh, dh)?;
        let scores = tape.matmul_t(q, k)?;
        let p = tape.causal_softmax(scores, scale);
        outs.push(tape.matmul(p, val)?);
    }
    let att = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let att = tape.matmul(att, v[3])?;
    let x = tape.add(x, att)?;
    let h = tape.layer_norm(x, v[4], v[5])?;
    let f = tape.matmul(h, v[6])?;
    let f = tape.add_row(f, v[7])?;
    let f = tape.gelu(f);
    let f = tape.matmul(f, v[8])?;
    let f = tape.add_row(f, v[9])?;
    tape.add(x, f)
}

pub(crate) fn layer_norm_plain(x: &Array2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> Array2<f64> {
    let (xhat, _) = normalize_rows(x);
    &xhat * gain + bias
}

/// Tape handles produced by [`Proposer::forward_tape`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Final layer-normed hidden state, `length × width`.
    pub hidden: Var,
    pub activations: Vec<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_len: 256,
        }
    }
}

/// Generated continuation of a prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// Log-probability of each emitted token under the sampling policy.
    pub logprobs: Vec<f64>,
    pub ended_with_eos: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposer {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
}

impl Proposer {
    /// Freshly initialized model; `config.vocab_size` is taken from `vocab`.
    pub fn new(mut config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let d = config.width;
        let v = config.vocab_size;
        let mut rng = rng_from(&[config.seed, 0x1417]);
        let mut params = ParamSet::new();
        params.push("tok_emb", normal(&mut rng, v, d, 0.1));
        params.push("pos_emb", normal(&mut rng, config.context_len, d, 0.02));
        for l in 0..config.layers {
            init_block(&mut params, &format!("l{l}"), d, config.layers, &mut rng);
        }
        params.push("lnf.g", Array2::ones((1, d)));
        params.push("lnf.b", Array2::zeros((1, d)));
        params.push("head", normal(&mut rng, d, v, 1.0 / (d as f64).sqrt()));
        params.push("head_b", Array2::zeros((1, v)));
        Ok(Self { config, vocab, params })
    }

    fn block(&self, layer: usize) -> usize {
        2 + layer * BLOCK_PARAMS
    }

    fn final_index(&self) -> usize {
        2 + self.config.layers * BLOCK_PARAMS
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::TooLong {
                len: tokens.len(),
                max: self.config.context_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::OutOfVocab {
                id: bad as u32,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the full forward pass. `vars` are the model parameters bound on `tape`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        tokens: &[usize],
        hook: Option<&dyn SteerHook>,
    ) -> Result<Forward> {
        self.check_tokens(tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = tape.gather(vars[0], tokens)?;
        let pos = tape.gather(vars[1], &positions)?;
        let mut x = tape.add(tok, pos)?;
        let mut activations = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let b = self.block(l);
            x = block_tape(tape, &vars[b..b + BLOCK_PARAMS], x, self.config.heads)?;
            if let Some(h) = hook.filter(|h| h.attaches(l)) {
                x = h.apply_tape(tape, l, x)?;
            }
            activations.push(x);
        }
        let (hidden, logits) = self.head_tape(tape, vars, x)?;
        Ok(Forward {
            logits,
            hidden,
            activations,
        })
    }

    /// Continues a forward pass from the pre-hook output `x` of `layer`: applies the hook
    /// there, runs the remaining layers and the output head.
    pub fn forward_from(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        layer: usize,
        mut x: Var,
        hook: Option<&dyn SteerHook>,
    ) -> Result<Forward> {
        if layer >= self.config.layers {
            return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
        }
        let mut activations = Vec::new();
        for l in layer..self.config.layers {
            if l > layer {
                let b = self.block(l);
                x = block_tape(tape, &vars[b..b + BLOCK_PARAMS], x, self.config.heads)?;
            }
            if let Some(h) = hook.filter(|h| h.attaches(l)) {
                x = h.apply_tape(tape, l, x)?;
            }
            activations.push(x);
        }
        let (hidden, logits) = self.head_tape(tape, vars, x)?;
        Ok(Forward {
            logits,
            hidden,
            activations,
        })
    }

    fn head_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<(Var, Var)> {
        let f = self.final_index();
        let hidden = tape.layer_norm(x, vars[f], vars[f + 1])?;
        let logits = tape.matmul(hidden, vars[f + 2])?;
        let logits = tape.add_row(logits, vars[f + 3])?;
        Ok((hidden, logits))
    }

    /// Logits (`length × vocab`) and post-hook activations of every layer.
    pub fn forward(&self, tokens: &[usize], hook: Option<&dyn SteerHook>) -> Result<(Array2<f64>, LayerActivations)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let f = self.forward_tape(&mut tape, &vars, tokens, hook)?;
        let acts = f.activations.iter().map(|a| tape.value(*a).clone()).collect();
        Ok((tape.value(f.logits).clone(), acts))
    }

    /// Final hidden state and logits.
    pub fn hidden_and_logits(&self, tokens: &[usize], hook: Option<&dyn SteerHook>) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let f = self.forward_tape(&mut tape, &vars, tokens, hook)?;
        Ok((tape.value(f.hidden).clone(), tape.value(f.logits).clone()))
    }

    /// Unhooked residual stream after `layer`.
    pub fn trunk(&self, tokens: &[usize], layer: usize) -> Result<Array2<f64>> {
        if layer >= self.config.layers {
            return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
        }
        self.check_tokens(tokens)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = tape.gather(vars[0], tokens)?;
        let pos = tape.gather(vars[1], &positions)?;
        let mut x = tape.add(tok, pos)?;
        for l in 0..=layer {
            let b = self.block(l);
            x = block_tape(&mut tape, &vars[b..b + BLOCK_PARAMS], x, self.config.heads)?;
        }
        Ok(tape.value(x).clone())
    }

    pub fn session(&self) -> Session<'_> {
        Session {
            model: self,
            keys: vec![Vec::new(); self.config.layers],
            values: vec![Vec::new(); self.config.layers],
            len: 0,
        }
    }

    /// Samples a continuation of `prompt` with one uniform draw per token from a
    /// ChaCha stream seeded by `seed`. Stops after EOS (which is emitted) or after
    /// `max_len` tokens, whichever comes first, and never exceeds the context length.
    pub fn sample(
        &self,
        prompt: &[usize],
        opts: &SampleOptions,
        seed: u64,
        hook: Option<&dyn SteerHook>,
    ) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(Error::Empty("prompt".into()));
        }
        if !(opts.temperature >= 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {}", opts.temperature)));
        }
        self.check_tokens(prompt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut session = self.session();
        let mut logits = Array1::zeros(0);
        for &t in prompt {
            logits = session.step(t, hook)?;
        }
        let budget = opts.max_len.min(self.config.context_len - prompt.len());
        let mut out = Generation {
            tokens: Vec::new(),
            logprobs: Vec::new(),
            ended_with_eos: false,
        };
        while out.tokens.len() < budget {
            let (tok, lp) = draw_token(logits.as_slice().expect("row"), opts.temperature, rng.gen());
            out.tokens.push(tok);
            out.logprobs.push(lp);
            if tok == EOS {
                out.ended_with_eos = true;
                break;
            }
            if out.tokens.len() < budget {
                logits = session.step(tok, hook)?;
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set("kind", Value::from("proposer"));
        ck.set("config", serde_json::to_value(&self.config).expect("config"));
        ck.set("vocab", Value::from(self.vocab.tokens().to_vec()));
        ck.add_params("model", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, origin: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            msg,
        };
        let config: ModelConfig = serde_json::from_value(ck.get("config").cloned().ok_or_else(|| fail("no model config".into()))?)
            .map_err(|e| fail(format!("model config: {e}")))?;
        let tokens: Vec<String> = serde_json::from_value(ck.get("vocab").cloned().ok_or_else(|| fail("no vocabulary".into()))?)
            .map_err(|e| fail(format!("vocabulary: {e}")))?;
        let vocab = Vocab::from_tokens(tokens)?;
        let mut model = Self::new(config, vocab)?;
        let params = ck.params("model");
        if params.names() != model.params.names()
            || params.values().iter().zip(model.params.values()).any(|(a, b)| a.dim() != b.dim())
        {
            return Err(fail("model parameters do not match the configuration".into()));
        }
        model.params = params;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

/// Incremental decoding state with per-layer key/value caches.
pub struct Session<'a> {
    model: &'a Proposer,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl Session<'_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `token` and returns the next-token logits.
    pub fn step(&mut self, token: usize, hook: Option<&dyn SteerHook>) -> Result<Array1<f64>> {
        let m = self.model;
        let cfg = &m.config;
        if token >= cfg.vocab_size {
            return Err(Error::OutOfVocab {
                id: token as u32,
                size: cfg.vocab_size,
            });
        }
        if self.len >= cfg.context_len {
            return Err(Error::TooLong {
                len: self.len + 1,
                max: cfg.context_len,
            });
        }
        let p = &m.params;
        let d = cfg.width;
        let dh = d / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = self.len + 1;
        let mut x = (&p.get(0).row(token) + &p.get(1).row(self.len)).insert_axis(ndarray::Axis(0));
        for l in 0..cfg.layers {
            let b = m.block(l);
            let h = layer_norm_plain(&x, p.get(b), p.get(b + 1));
            let qkv = h.dot(p.get(b + 2));
            let q = qkv.slice(s![0, 0..d]);
            self.keys[l].extend(qkv.slice(s![0, d..2 * d]).iter());
            self.values[l].extend(qkv.slice(s![0, 2 * d..3 * d]).iter());
            let keys = &self.keys[l];
            let vals = &self.values[l];
            let mut att = Array2::<f64>::zeros((1, d));
            let mut scores = vec![0.0; n];
            for head in 0..cfg.heads {
                let off = head * dh;
                for (j, sc) in scores.iter_mut().enumerate() {
                    let row = &keys[j * d + off..j * d + off + dh];
                    *sc = scale * (0..dh).map(|c| q[off + c] * row[c]).sum::<f64>();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    total += *sc;
                }
                for (j, w) in scores.iter().enumerate() {
                    let w = w / total;
                    let row = &vals[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        att[[0, off + c]] += w * row[c];
                    }
                }
            }
            x = &x + &att.dot(p.get(b + 3));
            let h = layer_norm_plain(&x, p.get(b + 4), p.get(b + 5));
            let f = (h.dot(p.get(b + 6)) + p.get(b + 7)).mapv(gelu);
            x = &x + &(f.dot(p.get(b + 8)) + p.get(b + 9));
            if let Some(hk) = hook.filter(|h| h.attaches(l)) {
                x = hk.apply(l, &x)?;
            }
        }
        self.len = n;
        let f = m.final_index();
        let hidden = layer_norm_plain(&x, p.get(f), p.get(f + 1));
        let logits = hidden.dot(p.get(f + 2)) + p.get(f + 3);
        Ok(logits.row(0).to_owned())
    }
}

/// Picks a token from one logit row given a uniform draw `u ∈ [0, 1)`.
///
/// Temperature 0 takes the arg-max (lowest index on ties) and reports its log-probability
/// under the untempered softmax; otherwise the token is found by inverse CDF over
/// `softmax(logits / temperature)` and its log-probability under that distribution.
pub fn draw_token(logits: &[f64], temperature: f64, u: f64) -> (usize, f64) {
    let inv = if temperature > 0.0 { 1.0 / temperature } else { 1.0 };
    let row = Array2::from_shape_fn((1, logits.len()), |(_, j)| logits[j] * inv);
    let logp = log_softmax_rows(&row);
    let tok = if temperature > 0.0 {
        let mut acc = 0.0;
        let mut chosen = logits.len() - 1;
        for (j, lp) in logp.row(0).iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                chosen = j;
                break;
            }
        }
        chosen
    } else {
        let mut best = 0;
        for (j, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = j;
            }
        }
        best
    };
    (tok, logp[[0, tok]])
}

/// Mean next-token cross-entropy of `logits` against `targets`, skipping [`PAD`] targets.
pub fn loss_ce(logits: &Array2<f64>, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let masked: Vec<Option<usize>> = targets.iter().map(|&t| (t != PAD).then_some(t)).collect();
    let loss = tape.cross_entropy(l, &masked)?;
    Ok(tape.scalar(loss))
}
