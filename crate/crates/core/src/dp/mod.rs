//! DP-SGD training and its privacy accountant.

pub mod accountant;
mod trainer;

pub use accountant::{
    calibrate_sigma, calibrate_sigma_schedule, convert_rdp_to_dp, convert_with_order, rdp_epsilon, rdp_orders,
    AccountantError, AccountantState, LedgerEntry,
};
pub use trainer::{
    checkpoint_schedule, clip_in_place, clip_per_sample, dp_sgd_step, poisson_sample, steps_for, train, train_seeded,
    Checkpoint, CheckpointStore, DpError, Mechanism, PrivacyParams, TrainConfig, TrainOutput, TrainRngs,
};
