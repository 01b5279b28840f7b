//! Error types shared across the simulator.

use thiserror::Error;

/// Errors produced by simulator operations.
#[derive(Debug, Error)]
pub enum SimError {
    /// An argument violated an operation precondition.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A file was malformed (bad magic, truncation, count mismatch).
    #[error("format error: {0}")]
    Format(String),

    /// An internal contract between modules was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// The server's public dataset does not cover every missing class.
    /// Carries the classes that cannot be compensated.
    #[error("coverage gap: public dataset lacks classes {uncovered:?}")]
    CoverageGap {
        /// Missing classes with no public samples.
        uncovered: Vec<usize>,
    },

    /// Configuration file problem, naming the offending key where possible.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SimError {
    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        SimError::Parameter(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        SimError::Format(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        SimError::Contract(msg.into())
    }
}
