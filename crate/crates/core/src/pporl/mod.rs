//! PPO training with adversarial and matched state-error rewards.

pub mod config;
pub mod eval;
pub mod policy;
pub mod ppo;
pub mod rewards;
pub mod trainer;

pub use config::{ConfigError, InitKind, MeMode, RunConfig, TaskKind, TOOL_VERSION};
pub use policy::{gaussian_log_prob, PolicyNet, ValueNet};
pub use ppo::{gae, normalize_advantages, ppo_update, PpoBatch, PpoParams, PpoStats};
pub use rewards::{augment_critic_obs, aux_rewards, baseline_task_reward, combined_reward, BaselineTask, RewardWeights};
pub use trainer::{train, Checkpoint, IterMetrics, Reference, Setup, TrainError, Trainer};
