use thiserror::Error;

/// Errors raised by the simulation library.
///
/// Variants are kept coarse on purpose: callers (the harness and the CLI)
/// branch on the category, the message carries the detail.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Invalid or infeasible configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Degenerate anchor geometry or coincident positions.
    #[error("geometry error: {0}")]
    Geometry(String),
    /// Anchor selection could not satisfy the request.
    #[error("anchor selection error: {0}")]
    Selection(String),
    /// Statistical model cannot be sampled.
    #[error("model error: {0}")]
    Model(String),
    /// A node lacks the hardware a measurement needs.
    #[error("capability error: {0}")]
    Capability(String),
    /// Event not allowed in the current session state.
    #[error("protocol error: event {event} is not valid in state {state}")]
    Protocol { state: String, event: String },
    /// Session queried before it reached a terminal state.
    #[error("session state error: {0}")]
    State(String),
    /// Caller misuse, e.g. summarizing an empty record set.
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;
