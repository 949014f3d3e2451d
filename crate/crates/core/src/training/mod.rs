//! Optimization loop: data pipeline, schedules, optimizers, EMA and checkpoints.

pub mod checkpoint;
pub mod data;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use data::{Balancing, CropSpec, PairedSample, Split, UnifiedSampler};
pub use optim::{Adam, AdamConfig, Ema};
pub use schedule::{sample_conditioning_drops, warmup_lr, DropRates, Drops};
pub use trainer::{generate_images, parallel_map, run_training, training_step, Batch, RunOutputs, RunSinks, StepContext, TrainConfig, TrainState, TrainingData};
