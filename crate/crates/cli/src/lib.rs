//! Command implementations and the session HTTP service behind `grounder`.

pub mod commands;
pub mod server;

use grounding_core::Error;
use serde_json::{json, Value};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_FILE: u8 = 3;
pub const EXIT_PARSE: u8 = 4;
pub const EXIT_ESTIMATION: u8 = 5;

/// Process exit code for an error: file problems, parse problems and
/// everything that fails during estimation each get their own code.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Json(_) | Error::Format(_) | Error::Scene(_) => EXIT_FILE,
        Error::Parse { .. } | Error::LlmSchema(_) | Error::LlmTransport(_) | Error::UnknownPredicate(_) => EXIT_PARSE,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_ESTIMATION,
    }
}

pub fn error_json(e: &Error) -> Value {
    json!({ "kind": e.kind(), "message": e.to_string(), "detail": e.detail() })
}
