//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by policy evaluation, log handling, and optimization.
#[derive(Debug, Error)]
pub enum Error {
    /// Structural misuse: bad dimensions, invalid hyperparameters, exhausted pools.
    #[error("configuration error: {0}")]
    Config(String),

    /// An action was scored or sampled outside its candidate set.
    #[error("invalid action: item {item} not in candidate set")]
    InvalidAction { item: u32 },

    /// A stored value violates a domain invariant (e.g. propensity outside (0,1]).
    #[error("validation error: {0}")]
    Validation(String),

    /// A log or policy file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A gradient turned non-finite during an update step.
    #[error("non-finite gradient in group {group} (user {user_id}, t'={t_prime})")]
    NonFiniteGradient {
        group: usize,
        user_id: u64,
        t_prime: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
