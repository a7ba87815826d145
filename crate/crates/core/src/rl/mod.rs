//! PPO on a gridworld, with the teaching regularizer and replay-fed students.

mod env;
mod ppo;

pub use env::{env_reset, env_step, Actor, Cell, Env, GridWorld, StepCounters, StepOutcome, ACTION_COUNT, STANDARD_MAP};
pub use ppo::{
    collect_rollout, evaluate_policy, gae_advantages, lot_ppo_train, normalize_advantages, policy_eval, ppo_loss,
    ppo_train, ppo_update, rollout_advantages, student_imitate_rl, Advantages, PolicyTable, PpoConfig, PpoLoss,
    PpoMinibatch, PpoStats, RegularizerSource, ReplayBuffer, RlOutcome, RolloutBatch, Transition,
};
