//! Experiment configuration, line-oriented datasets and checkpoints.

mod checkpoint;
mod config;
mod dataset;

pub use checkpoint::{
    checkpoint_from_str, checkpoint_to_string, load_checkpoint, load_checkpoint_kind,
    save_checkpoint, Model, CHECKPOINT_VERSION,
};
pub use config::{config_to_string, parse_config, ExperimentConfig, IcSection, ModelKind, Task};
pub use dataset::{load_ic_dataset, load_pra_dataset, save_ic_dataset, save_pra_dataset};
