use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("all mixture weights are zero")]
    ZeroWeights,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// The product of the per-expression fields vanished everywhere: the
    /// expressions cannot be satisfied together.
    #[error("contradictory composition: {0}")]
    Contradiction(String),

    #[error("score field is zero everywhere")]
    EmptyField,

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("parse error at token {position} ({token:?}): {message}")]
    Parse {
        position: usize,
        token: String,
        message: String,
    },

    #[error("llm transport error: {0}")]
    LlmTransport(String),

    #[error("llm reply does not match the schema: {0}")]
    LlmSchema(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("episode generation failed: {0}")]
    Generation(String),

    #[error("unknown predicate {0:?}")]
    UnknownPredicate(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unknown session {0:?}")]
    UnknownSession(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used in CLI and service error payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::ZeroWeights => "zero_weights",
            Error::GridMismatch(_) => "grid_mismatch",
            Error::Contradiction(_) => "contradiction",
            Error::EmptyField => "empty_field",
            Error::Scene(_) => "scene",
            Error::Parse { .. } => "parse",
            Error::LlmTransport(_) => "llm_transport",
            Error::LlmSchema(_) => "llm_schema",
            Error::Shape(_) => "shape",
            Error::Divergence(_) => "divergence",
            Error::Generation(_) => "generation",
            Error::UnknownPredicate(_) => "unknown_predicate",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::UnknownSession(_) => "not_found",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Structured extras for error payloads.
    pub fn detail(&self) -> serde_json::Value {
        match self {
            Error::Parse { position, token, .. } => serde_json::json!({ "position": position, "token": token }),
            Error::UnknownSession(id) => serde_json::json!({ "id": id }),
            Error::UnknownPredicate(p) => serde_json::json!({ "predicate": p }),
            _ => serde_json::Value::Null,
        }
    }
}
