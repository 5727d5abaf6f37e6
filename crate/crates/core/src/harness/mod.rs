//! Experiment configuration, training loops and the file-level commands the
//! `bckd` binary exposes.

pub mod commands;
pub mod config;
pub mod train;

pub use commands::{
    cmd_ablate, cmd_demo_inconsistency, cmd_distill, cmd_eval, cmd_gen_data, cmd_score_gap, cmd_train, output_root,
    TrainMode, OUTPUT_ROOT_ENV,
};
pub use config::ExperimentConfig;
