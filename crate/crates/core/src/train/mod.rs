//! Training: configuration, optimizer, model assembly and the step loop.

mod adam;
mod config;
mod model;
mod trainer;

pub use adam::{Adam, AdamConfig};
pub use config::{CodebookConfig, DatasetSpec, RunConfig};
pub use model::{CfaslModel, LossSettings, StepLosses};
pub use trainer::{
    checkpoint_step, load_model, StepRecord, Trainer, CONFIG_SNAPSHOT, LOSS_LOG, NAN_DUMP, OPTIMIZER_FILE,
    PARAMS_FILE, STATE_FILE,
};
