//! Configuration and the command implementations behind the CLI.

pub mod commands;
pub mod config;

pub use commands::{
    ablation_table, cmd_ablate, cmd_eval, cmd_predict, cmd_trace, cmd_train, prepare, AblationRow, CommandError,
    EvalOutputs, TrainOutcome,
};
pub use config::{ConfigError, RunConfig};
