//! Predictive resource allocation: users moving along roads download a file
//! within a window of frames, and a plan assigns each user a fraction of
//! every frame of its serving base station. The LP oracle gives the optimal
//! plan; a PINN-1D primal network and a fully connected dual network learn
//! it without labels.

mod edf;
mod lp;
mod plan;
mod scenario;
mod train;

pub use edf::{edf_baseline, EdfOptions, EdfReport};
pub use lp::{
    lp_solve_p1, p1_grid_oracle, solve_standard, LpOptions, LpSolution, LpStatus, P1Solution,
    StandardLp,
};
pub use plan::{evaluate_plan, loads, normalize_plan, pra_cost, CostParts, PlanReport};
pub use scenario::{compute_average_rates, generate_pra_scenario, Association, PraConfig, PraScenario};
pub use train::{
    build_pra_nets, dual_input, evaluate_pra, infer_plan, make_pra_dataset, pra_sample_at,
    record_pra_cost,
    train_pra, train_pra_with, PraBatch, PraEvaluation, PraGraph, PraHyper, PraNets, PraSample, PraTrace,
};
