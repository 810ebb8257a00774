//! The proposer: a small pre-LN causal transformer over word tokens.

mod transformer;
pub mod vocab;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

pub use transformer::{
    draw_token, loss_ce, Forward, Generation, Proposer, SampleOptions, Session,
};
pub(crate) use transformer::{block_tape, init_block, BLOCK_PARAMS};
pub use vocab::Vocab;

/// Post-hook residual stream after each layer, one `length × width` matrix per layer.
pub type LayerActivations = Vec<Array2<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 64,
            heads: 4,
            context_len: 256,
            vocab_size: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model config: {m}")));
        if self.layers == 0 {
            return bad("layers must be at least 1");
        }
        if self.width < 8 {
            return bad("width must be at least 8");
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad("head count must divide the width");
        }
        if self.context_len < 2 {
            return bad("context length must be at least 2");
        }
        if self.vocab_size <= vocab::UNK {
            return bad("vocabulary too small");
        }
        Ok(())
    }
}

/// Per-layer transform of the residual stream, applied after the layer's block.
pub trait SteerHook {
    /// Whether the hook acts on the output of `layer`.
    fn attaches(&self, layer: usize) -> bool;

    /// Plain evaluation on a `rows × width` activation matrix.
    fn apply(&self, layer: usize, m: &Array2<f64>) -> Result<Array2<f64>>;

    /// Recorded evaluation, so gradients reach any parameters the hook placed on `tape`.
    fn apply_tape(&self, tape: &mut Tape, layer: usize, m: Var) -> Result<Var>;
}

/// Hook that returns its input unchanged on every layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityHook;

impl SteerHook for IdentityHook {
    fn attaches(&self, _layer: usize) -> bool {
        true
    }

    fn apply(&self, _layer: usize, m: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(m.clone())
    }

    fn apply_tape(&self, _tape: &mut Tape, _layer: usize, m: Var) -> Result<Var> {
        Ok(m)
    }
}
