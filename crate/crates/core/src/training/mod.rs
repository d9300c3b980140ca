//! Pretraining, distillation, policy-gradient routing and fine-tuning.

mod explore;
mod log;
mod prepare;
mod pretrain;
mod reward;
mod rl;

pub use explore::{sample_action, schedule, Phase, ScheduleState};
pub use log::{Event, EventLog};
pub use prepare::{
    execute_actions, iou_table, paser_infer, predict_patches, prepare, route, Inference, IouTable, Prepared, MC_CHUNK,
};
pub use pretrain::{
    batched_logits, kd_loss, patch_examples, pretrain_large, pretrain_small_kd, stitched_logits, KdHistory, TrainConfig,
};
pub use reward::{compute_reward, Action, RewardBreakdown};
pub use rl::{
    finetune, finetune_tvd, policy_gradient_loss, policy_update, routing_marginal, train_rl, FinetuneConfig, RlConfig,
    RlHistory, TvdConfig, TvdOutcome, PROB_FLOOR,
};

#[cfg(test)]
mod tests;
