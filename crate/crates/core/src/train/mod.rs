//! Optimizer, data pipeline, metrics and the teacher / student training loops.

mod data;
mod driver;
mod metrics;
mod optim;

pub use data::{
    load_dataset, parse_idx, read_idx, split_paths, synth_digits, write_idx_u8, write_synth_split, Batch, Dataset,
    IdxArray,
};
pub use driver::{
    distill_student, epochs_trained, evaluate_student, evaluate_teacher, train_teacher, DistillRun, Method, StepRecord, TrainConfig,
    TrainOutcome,
};
pub use metrics::{EpochRow, RunMetrics, METRICS_HEADER};
pub use optim::{cosine_lr, decays, named_grads, AdamWConfig, OptimState};
