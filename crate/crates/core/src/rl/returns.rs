//! Per-token rewards, advantages, value targets and the clipped surrogate.

use crate::error::{Error, Result};

/// Reward vector of a `len`-token generation: `weight · reward` on the final token and
/// zero elsewhere.
pub fn assign_terminal_reward(len: usize, reward: f64, weight: f64) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(Error::InvalidArgument("cannot assign reward to an empty generation".into()));
    }
    let mut out = vec![0.0; len];
    out[len - 1] = weight * reward;
    Ok(out)
}

/// Generalized advantage estimates by backward recursion.
///
/// `values` holds `V(s_0) … V(s_{K−1})` and `bootstrap` is `V(s_K)` (0 when the episode
/// terminated). `A_t = δ_t + γλ·A_{t+1}` with `δ_t = r_t + γV(s_{t+1}) − V(s_t)`.
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(Error::Shape(format!(
            "gae: {} rewards vs {} values",
            rewards.len(),
            values.len()
        )));
    }
    let k = rewards.len();
    let mut adv = vec![0.0; k];
    let mut next_adv = 0.0;
    for t in (0..k).rev() {
        let next_v = if t + 1 < k { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next_v - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
    }
    Ok(adv)
}

/// Discounted value targets `Σ_{t'≥t} γ^{t'−t} r_{t'} + γ^{K−t}·V_old(s_K)`, where
/// `bootstrap` is the lagging model's `V_old(s_K)`.
pub fn value_targets(rewards: &[f64], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Mean over tokens of `min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)`, `ρ = exp(new − old)`.
pub fn ppo_surrogate(new_logprobs: &[f64], old_logprobs: &[f64], advantages: &[f64], clip: f64) -> Result<f64> {
    if new_logprobs.len() != old_logprobs.len() || old_logprobs.len() != advantages.len() {
        return Err(Error::Shape("ppo_surrogate length mismatch".into()));
    }
    if new_logprobs.is_empty() {
        return Err(Error::Empty("ppo_surrogate over zero tokens".into()));
    }
    let mut total = 0.0;
    for ((&n, &o), &a) in new_logprobs.iter().zip(old_logprobs).zip(advantages) {
        let ratio = (n - o).exp();
        if !ratio.is_finite() {
            return Err(Error::Divergence(format!("non-finite probability ratio from {n} − {o}")));
        }
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
        total += (ratio * a).min(clipped * a);
    }
    Ok(total / new_logprobs.len() as f64)
}
