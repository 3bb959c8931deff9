//! AAM-softmax training: loss, schedules, batch sampling, optimisers, the
//! TOML config and the loop itself.

mod aam;
mod batch;
mod config;
mod optim;
pub mod probe;
mod schedule;
pub mod synth;
mod trainer;

pub use aam::{aam_logits, aam_loss_var, aam_softmax_loss, AamConfig, AamParams};
pub use batch::{sample_batch, BatchSpec};
pub use config::{DataSpec, TrainConfig};
pub use optim::{Optimizer, OptimizerSpec};
pub use schedule::{lr_at, ScheduleSpec};
pub use synth::SyntheticSpec;
pub use trainer::{
    all_pairs_eer, embed_all, model_features, model_frontend, train, StepRecord, TrainOutput, Trainer, TrainingSet,
    AAM_WEIGHT, FINAL_CHECKPOINT, METRICS_FILE,
};
