//! Masked-step reconstruction pretraining.
//!
//! A share of real positions is hidden at the model input, the
//! encoder-decoder reconstructs every real step, and Adam minimizes
//! the summed MSE and cross-entropy. With `workers > 1` each mini-batch is
//! sharded across threads and the shard gradients are reduced before one
//! synchronous update.

mod adam;
mod checkpoint;
mod loss;
mod masking;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{AnyCheckpoint, Checkpoint, RngState, MAGIC, VERSION};
pub use loss::{loss_positions, reconstruction_loss};
pub use masking::{apply_mask, mask_plan};
pub use trainer::{
    batch_gradients, initial_checkpoint, resume, train, train_data_parallel, EpochLog,
    EpochTiming, StepGrads, TimingReport, TrainConfig, TrainError, TrainOutcome,
};
