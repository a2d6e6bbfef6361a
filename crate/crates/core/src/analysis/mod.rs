//! Verifiers and experiment sweeps: Monte Carlo checks of the scaling laws,
//! the parameter/memory/communication cost model, subnet stability and
//! robustness sweeps, and the Fisher block-prune baseline.

pub mod cost;
pub mod fisher;
pub mod mc;
pub mod sweeps;

pub use cost::{
    comm_volume, count_params, count_params_uniform, gpt2_preset, memory_ratio_curve,
    subnet_params_formula, CostReport, GPT2_FAMILY,
};
pub use fisher::{fisher_block_prune, fisher_scores, FisherScores};
pub use mc::{mc_verify_attn_scaling, mc_verify_ffn_scaling, ScalingRow, ScalingTable};
pub use sweeps::{
    grid_asymmetry, robustness_grid, stability_sweep, subnet_loss_distribution, SweepCell,
    SweepResult,
};
