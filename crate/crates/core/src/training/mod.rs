//! Joint likelihood and self-critical training of the two-pass model.

mod config;
mod loss;
mod trainer;

pub use config::{Mode, TrainConfig, PATH_KEYS};
pub use loss::{
    combined_loss, combined_loss_given, joint_mle_loss, mixed_reward, mle_loss_first, mle_loss_second, rl_loss,
    sample_seeds, self_critical, self_critical_loss, LossTerms, LossWeights, Reward, SelfCritical,
};
pub use trainer::{
    default_lambda_grid, dev_loss, evaluate, lambda_sweep, model_config, reward_for, train,
    translate_talks, DevMetrics, StepReport, SweepRow, SweepTable, TrainOutcome, Trainer,
};
