//! SGD training with step schedules, mixup, checkpoints and evaluation.

mod config;
mod eval;
mod run;
mod sgd;

pub use config::{lr_at, DataConfig, DataSource, TrainConfig, PRESETS};
pub use eval::{evaluate, evaluate_topk, predict, topk_error};
pub use run::{
    load_checkpoint, meta_path, read_metrics_csv, train_from_config, write_metrics_csv,
    CheckpointMeta, DataMeta, EpochMetrics, Trainer, CHECKPOINT_FILE, METRICS_FILE,
};
pub use sgd::{sgd_step, SgdParams, Velocity};
