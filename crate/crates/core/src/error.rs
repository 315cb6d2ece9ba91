use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or configuration mismatch (wrong vector width, bad vocab, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input violates an operation precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Caller broke an API contract (e.g. asked to mutate frozen parameters).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A constraint has no satisfying value (degenerate search space).
    #[error("constraint unsatisfiable: {0}")]
    Constraint(String),

    /// Malformed serialized data, with the 1-based line it came from.
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Training aborted because a loss stopped being finite.
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
