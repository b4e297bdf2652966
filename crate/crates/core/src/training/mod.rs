//! Objective composition, learning-rate schedule, Adam, checkpoints and
//! the training loop.

mod checkpoint;
mod config;
mod loss;
mod optim;
mod trainer;

pub use checkpoint::{
    load_checkpoint, manifest_for, manifest_path, save_checkpoint, CheckpointManifest, ParamEntry,
};
pub use config::{FeaturePolicy, LossMode, TrainConfig};
pub use loss::{compose_loss, unit_loss, UnitLoss};
pub use optim::{lr_at, Adam};
pub use trainer::{train, EpochLog, TrainReport, CHECKPOINT_FILE, METRICS_FILE};
