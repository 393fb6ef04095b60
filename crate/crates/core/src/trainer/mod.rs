//! The semi-supervised training loop on synthetic scenes.
//!
//! Each step trains the student on weak and strong views of a labeled batch,
//! labels an unlabeled batch with the EMA teacher, and trains the student on
//! a strong view of that batch, optionally tile-mixed before the backbone and
//! unmixed after it. The teacher then follows the student by EMA.

mod config;
mod dataset;
mod run;
mod step;

pub use config::{TrainConfig, UnsupNormalizer};
pub use dataset::{
    generate_dataset, generate_eval_set, render_scene, stack_images, Dataset, SyntheticScene, UnlabeledScene, CLASS_NAMES,
    NUM_CLASSES,
};
pub use run::{build_data, evaluate, run_training, run_training_with, write_history_csv, HistoryRow, TrainOutcome};
pub use step::{
    apply_step, prepare_step, sample_batches, sgd_update, train_step, LabeledBatch, PreparedStep, StepLog, StepLosses,
    StepOptions, TrainState, UnsupervisedBatch,
};
