//! Crate-level error type for fallible, I/O-facing operations.
//!
//! Contract violations inside the math kernels (shape mismatches,
//! out-of-range label ids, degenerate boxes) panic instead; they are
//! programming errors, not runtime conditions.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
}
