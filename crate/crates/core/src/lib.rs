//! Steerable research-idea proposer: supervised fine-tuning of a small autoregressive
//! model, three per-dimension reward models, PPO-trained steering adapters, and static
//! or schedule-driven controllable decoding.

pub mod autograd;
pub mod checkpoint;
pub mod decode;
pub mod evalsuite;
pub mod model;
pub mod corpus;
mod error;
pub mod optim;
pub mod pipeline;
pub mod reward;
pub mod rl;
pub mod rng;
pub mod run;
pub mod sft;
pub mod steer;

pub use error::{Error, Result};
