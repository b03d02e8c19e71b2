//! Loss, optimizer, learning-rate schedule, training loop and checkpoints.

mod adam;
pub mod checkpoint;
mod config;
mod gradcheck;
mod loss;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, round_to_f32, save_checkpoint, Checkpoint, CheckpointError, Provenance,
    TrainState,
};
pub use config::{lr_at, TrainConfig};
pub use gradcheck::{model_gradcheck, perturbed_params, ModelGradCheck};
pub use loss::{mse_loss, LossReduction};
pub use trainer::{metrics_csv, train, EpochLog, Trainer, METRICS_HEADER};
