//! Command-line driver: configuration layering, run directories and the
//! `train`, `evaluate`, `augment`, `convert-tests`, `ablate` and
//! `serve-toy` commands.

pub mod cli;
pub mod commands;
pub mod config;

pub use cli::run;
pub use commands::{
    cmd_ablate, cmd_augment, cmd_convert_tests, cmd_evaluate, cmd_serve_toy, cmd_train, CliError, EvaluateOptions,
    Split, Sweep, TrainOptions,
};
pub use config::RunConfig;
