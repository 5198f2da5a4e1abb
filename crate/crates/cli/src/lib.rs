//! Configuration and subcommands of the `stochload` command line tool.

pub mod commands;
pub mod config;

pub use config::{ExperimentConfig, Overrides};

/// Process exit status for a failed command: 2 for configuration and
/// input problems, 3 for numerical failures.
pub fn exit_code(err: &stochload::Error) -> i32 {
    if err.is_config() {
        2
    } else {
        3
    }
}
