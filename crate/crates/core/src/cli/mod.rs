//! Run configuration and the gen, train, eval and predict commands.

pub mod commands;
pub mod config;

pub use commands::{cmd_eval, cmd_gen, cmd_predict, cmd_train, load_model, load_split, GenSummary, Report, TrainSummary};
pub use config::{DataConfig, EvalConfig, Overrides, RunConfig, OUTPUT_ROOT_ENV};

use crate::error::Error;

/// Process exit status: 1 for usage and configuration problems, 2 for
/// failures while running.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        _ => 2,
    }
}
