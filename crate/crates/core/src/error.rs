use alloc::string::String;
use alloc::vec::Vec;

/// A rule broken by a single field.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{field}: {message}")]
pub struct ValidationError {
    pub field: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

/// Failure of the chat-completion backend.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("backend unavailable after {attempts} attempts (last status: {last_status:?}): {message}")]
    BackendUnavailable { attempts: u32, last_status: Option<u16>, message: String },
    #[error("request rejected with status {status}: {body}")]
    RequestRejected { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("session is finalized")]
    Finalized,
    #[error("round still has pending questions: {0:?}")]
    PendingQuestions(Vec<String>),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("llm backend failed: {0}")]
    Backend(#[from] GatewayError),
    #[error("event log is inconsistent: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("at least one reference is required")]
    NoReferences,
    #[error("n-gram order must be at least 1")]
    ZeroOrder,
    #[error("expected {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
}
