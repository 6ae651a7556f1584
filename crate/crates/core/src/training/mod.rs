//! Objectives, the s-vector table, the optimizer and the training loop.

pub mod adam;
pub mod gradcheck;
pub mod infer;
pub mod loss;
pub mod svector;
pub mod trainer;

pub use adam::{Adam, AdamParams};
pub use gradcheck::{check_gradients, rel_err, GradCheckReport};
pub use infer::{infer_svector, svector_from_means, z2_means};
pub use loss::{batch_objective, discriminative_loss, fhvae_apc_loss, fhvae_loss, scaled_log_prior, BatchLoss, BatchTargets, LossBreakdown};
pub use svector::SVectorTable;
pub use trainer::{minibatch, train, EpochRecord, MinibatchResult, RunOptions, SegmentSet, TrainConfig, TrainState, TrainSummary};

#[cfg(test)]
mod tests;
