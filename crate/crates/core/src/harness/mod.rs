//! Run configuration, training, editing and evaluation: the operations the
//! command-line front end exposes.

mod config;
mod edit;
mod eval;
mod gradcheck;
mod optim;
mod train;

pub use config::{PathsConfig, RunConfig, ScheduleConfig, TrainConfig};
pub use edit::{edit, masked_mse, EditRequest};
pub use eval::{eval_dirs, eval_sets, load_prompts, load_video_set, EVAL_EMBEDDER_SEED};
pub use gradcheck::{
    grad_check_suite, model_check, primitive_checks, small_model_config, GradCheckResult, MODEL_TOLERANCE,
    PRIMITIVE_TOLERANCE,
};
pub use optim::{AdamW, AdamWConfig};
pub use train::{
    checkpoint_name, load_dataset, train_dir, Checkpoint, TrainState, Trainer, CONFIG_FILE, GRAD_DUMP_FILE,
    LAST_CHECKPOINT, LOSS_FILE,
};
