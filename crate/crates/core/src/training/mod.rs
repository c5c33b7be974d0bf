//! Adversarial training: schedule, optimizer, steps, checkpoints, loss log
//! and attention snapshots.

mod adam;
mod checkpoint;
mod config;
mod run;
mod snapshot;
mod state;
mod trainer;

pub use adam::{Adam, ADAM_EPS};
pub use checkpoint::{load_checkpoint, load_generator, save_checkpoint, save_generator, CHECKPOINT_FORMAT};
pub use config::{lr_schedule, TrainConfig, DEFAULT_SNAPSHOT_EPOCHS};
pub use run::{run_training, RunOutcome, LAST_CHECKPOINT, LOSS_LOG, SNAPSHOT_DIR};
pub use snapshot::{attention_grid, snapshot_attention, snapshot_file};
pub use state::{RunningLosses, Sampler, TrainState};
pub use trainer::{CriticUpdate, GeneratorUpdate, LossRecord, Trainer};
