//! Optimizers, learning-rate schedules, checkpoints, and the curriculum loop.

mod checkpoint;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{load_network_tensors, network_tensors, Checkpoint};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use schedule::Schedule;
pub use trainer::{
    metrics_csv, network_from_checkpoint, EpochHook, EpochMetrics, Position, TrainConfig,
    Trainer, METRICS_HEADER,
};
