use std::fmt;

use evodw_core::Error;
use serde_json::{json, Value};

/// A stable error code and a human-readable message. Every failure the
/// service or the command line reports takes this shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> ApiError {
        ApiError { code: code.to_string(), message: message.into() }
    }

    pub fn config(key: &str, message: impl fmt::Display) -> ApiError {
        ApiError::new("CONFIG_INVALID", format!("{key}: {message}"))
    }

    pub fn malformed(message: impl fmt::Display) -> ApiError {
        ApiError::new("MALFORMED_DOCUMENT", message.to_string())
    }

    pub fn missing(name: &str) -> ApiError {
        ApiError::new("MISSING_PARAMETER", format!("missing parameter: {name}"))
    }

    pub fn invalid(message: impl fmt::Display) -> ApiError {
        ApiError::new("INVALID_PARAMETER", message.to_string())
    }

    /// HTTP status for the code.
    pub fn status(&self) -> u16 {
        status_of(&self.code)
    }

    pub fn body(&self) -> Value {
        json!({"error": {"code": self.code, "message": self.message}})
    }
}

/// Codes raised by the shell itself, on top of the engine's.
pub const SHELL_CODES: &[&str] =
    &["CONFIG_INVALID", "PORT_IN_USE", "DATA_DIR_UNWRITABLE", "ROUTE_NOT_FOUND"];

pub fn status_of(code: &str) -> u16 {
    match code {
        "MALFORMED_DOCUMENT" => 400,
        "NOT_FOUND" | "UNKNOWN_SOURCE" | "UNKNOWN_DATASET" | "UNKNOWN_CUBE" | "ROUTE_NOT_FOUND" => 404,
        "VERSION_CONFLICT" | "DUPLICATE_SOURCE" | "RULE_CONFLICT" | "ILLEGAL_TRANSITION" | "ALREADY_RESOLVED"
        | "ALREADY_PROPOSED" | "PORT_IN_USE" => 409,
        "APPLY_FAILED" | "IO_ERROR" | "DATA_DIR_UNWRITABLE" | "CONFIG_INVALID" => 500,
        _ => 422,
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> ApiError {
        ApiError::new(e.code(), e.message())
    }
}

impl fmt::Display for ApiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}
