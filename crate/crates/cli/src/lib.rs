//! Command implementations behind the `cotri` binary.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{cmd_clean, cmd_da, cmd_eval, cmd_fit, cmd_synth, DaOptions, FitOptions};

/// Process exit code for a failed command: 2 for configuration and input
/// problems, 1 for runtime failures.
pub fn exit_code(e: &cotri::Error) -> i32 {
    if e.is_config() {
        2
    } else {
        1
    }
}
