use thiserror::Error;

/// Crate-wide error type. Variants group into the categories the CLI maps
/// to exit codes: validation, resource, numeric, optimization, transport.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad arguments or violated preconditions.
    #[error("validation: {0}")]
    Validation(String),

    /// A configured resource budget would be exceeded.
    #[error("resource limit: {0}")]
    Resource(String),

    /// Non-finite values or other numerical failures.
    #[error("numeric: {0}")]
    Numeric(String),

    /// A subspace or quadratic form collapsed to nothing usable.
    #[error("degenerate: {0}")]
    Degenerate(String),

    /// A matrix factorization failed even after jitter escalation.
    #[error("ill-conditioned: {0}")]
    IllConditioned(String),

    /// The outer optimizer failed to produce a converged iterate.
    #[error("optimization: {0}")]
    Optimization(String),

    /// An MCMC chain failed to move at all.
    #[error("mcmc mixing: {0}")]
    Mixing(String),

    /// An oracle computation (study targets) did not converge.
    #[error("oracle: {0}")]
    Oracle(String),

    /// External model transport failure (timeout, broken pipe).
    #[error("transport: {0}")]
    Transport(String),

    /// External model sent a line that does not follow the wire protocol.
    #[error("protocol: {0}")]
    Protocol(String),

    /// External model process failed (nonzero exit, reported error).
    #[error("process: {0}")]
    Process(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
