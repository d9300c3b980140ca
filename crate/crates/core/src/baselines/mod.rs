//! Comparison baselines: the entropy-gated model cascade and random routing.

mod cascade;
mod random;

pub use cascade::{
    idk_infer, idk_loss, iou_match_tune, joint_thresholds, threshold_grid, tune_idk, tune_idk_over, CascadeCache,
    CascadeConfig, GridSpec, MatchOutcome,
};
pub use random::{random_policy_expected_flops, random_policy_infer};

#[cfg(test)]
mod tests;
