//! Error-to-exit-code mapping. The contract is stable for scripting:
//! 0 success, 1 runtime failure (bad data, I/O, training blow-ups),
//! 2 usage or configuration error (bad flags, malformed or invalid
//! config JSON, incompatible dimensions caught up front).

use std::fmt::Display;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// A failed command: what to print and which code to exit with.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

/// A usage/config failure (exit 2).
pub fn usage(msg: impl Display) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: msg.to_string(),
    }
}

/// A runtime failure (exit 1).
pub fn runtime(msg: impl Display) -> CliError {
    CliError {
        code: EXIT_RUNTIME,
        message: msg.to_string(),
    }
}

impl From<ibkd::Error> for CliError {
    fn from(e: ibkd::Error) -> Self {
        // Configuration mistakes are usage errors no matter how deep in the
        // library they surface; everything else is a runtime failure.
        match e {
            ibkd::Error::Config(_) => usage(e),
            _ => runtime(e),
        }
    }
}
