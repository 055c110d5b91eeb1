//! Interference coordination: Rayleigh channels, sum-rate, WMMSE labels,
//! the exhaustive grid check, supervised training and relabeling
//! augmentation.

mod channel;
mod data;
mod grid;
mod train;
mod wmmse;

pub use channel::{generate_channels, sum_rate, IcConfig};
pub use data::{augment, distinct_permutations, ic_sample_at, make_ic_dataset, IcSample};
pub use grid::grid_oracle;
pub use train::{
    build_ic_fc, build_ic_pinn, evaluate_ic, record_mse, score_ic, train_ic_supervised,
    IcEvaluation, IcHyper, IcModel, IcNet,
};
pub use wmmse::{wmmse_run, wmmse_solve, WmmseConfig, WmmseRun};
