//! The three-player pseudo-label engine: splicing, fine-tuning, joint
//! prediction, thresholds and the pseudo-label local update.

mod pseudo;
mod splice;
mod threshold;
mod update;

pub use pseudo::{joint_from_probs, joint_predict, select_indices, select_pseudo, JointPrediction, PseudoEntry, PseudoSet};
pub use splice::{splice, SpliceSpec};
pub use threshold::{
    client_threshold, global_threshold, global_unlabeled_probs, max_confidence, ScheduleMode, ThresholdSchedule,
    ThresholdState,
};
pub use update::{
    combined_loss_and_grad, finetune, local_update_phase2, run_phase2, train_paired, Phase2Config, Phase2Update,
};

#[cfg(test)]
mod tests;
