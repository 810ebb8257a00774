//! Multi-dimension reward-augmented PPO.

mod returns;
mod trainer;

pub use returns::{assign_terminal_reward, gae, ppo_surrogate, value_targets};
pub use trainer::{
    load_policy, model_digest, rl_checkpoint, rollout, train_rl, Policy, PpoConfig, RewardSign, RlOptimizers,
    RlReport, RlStepRecord, Trajectory, ValueHeads,
};
