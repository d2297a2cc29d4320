//! Command-line front end: configuration handling and the `simulate`,
//! `identify`, `evaluate` and `montecarlo` subcommands.

pub mod commands;
pub mod config;

pub use commands::{cmd_evaluate, cmd_identify, cmd_montecarlo, cmd_simulate};
pub use config::{Format, Resolved, RunConfig};

use latentnet::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// 2 for bad configuration or unreadable inputs, 3 for numerical failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        e if e.is_config_error() => EXIT_CONFIG,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) => EXIT_CONFIG,
        _ => EXIT_NUMERIC,
    }
}
