//! Command-line harness: configuration, CSV I/O and the subcommands.

pub mod commands;
pub mod config;
pub mod io;
pub mod selftest;

pub use commands::{cmd_filter, cmd_kl, cmd_simulate, Report};
pub use config::{ExperimentConfig, Overrides};

use crate::Error;

/// Harness failures, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl HarnessError {
    /// 2 for configuration, 3 for numerical failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Io(_) => 4,
            HarnessError::Core(e) if e.is_numerical() => 3,
            HarnessError::Core(_) => 2,
        }
    }

    /// Guidance printed alongside the error, if any.
    pub fn hint(&self) -> Option<&'static str> {
        fn degenerate(e: &Error) -> bool {
            match e {
                Error::Degenerate { .. } => true,
                Error::AtStep { source, .. } => degenerate(source),
                _ => false,
            }
        }
        match self {
            HarnessError::Core(e) if degenerate(e) => Some(
                "all particles received zero weight: increase --particles, use the ekf proposal, \
                 or check that the measurement noise and prior are consistent with the data",
            ),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(HarnessError::Config("x".into()).exit_code(), 2);
        assert_eq!(HarnessError::Io("x".into()).exit_code(), 4);
        assert_eq!(HarnessError::from(Error::Degenerate { step: 3 }).exit_code(), 3);
        let nested = Error::InvalidWeights("nan".into()).at_step(2);
        assert_eq!(HarnessError::from(nested).exit_code(), 3);
        assert_eq!(HarnessError::from(Error::InvalidParameter("p".into())).exit_code(), 2);
        assert!(HarnessError::from(Error::Degenerate { step: 1 }).hint().is_some());
        assert!(HarnessError::Io("x".into()).hint().is_none());
    }
}
