use std::fmt;

use arbor_core::bench::BenchError;
use arbor_core::orchestrator::OrchestratorError;
use arbor_core::perception::PerceptionError;
use arbor_core::policy::PolicyError;
use arbor_core::tree::TreeError;
use serde::Serialize;

/// How an error should surface: an HTTP status class, and for the CLI a
/// domain error (exit 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    BadRequest,
    NotFound,
    Unprocessable,
    TooLarge,
    Unauthorized,
    BadGateway,
    Timeout,
    Internal,
}

/// A machine-readable `kind` (the core module's error name) plus a message.
#[derive(Debug, Clone, PartialEq)]
pub struct OpError {
    pub class: Class,
    pub kind: String,
    pub message: String,
}

impl OpError {
    pub fn new(class: Class, kind: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            class,
            kind: kind.into(),
            message: message.into(),
        }
    }

    pub fn bad_request(kind: &str, message: impl Into<String>) -> Self {
        Self::new(Class::BadRequest, kind, message)
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(Class::NotFound, format!("unknown_{what}"), format!("no {what} with id `{id}`"))
    }

    pub fn io(path: &str, e: std::io::Error) -> Self {
        Self::new(Class::BadRequest, "io_error", format!("{path}: {e}"))
    }
}

impl fmt::Display for OpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for OpError {}

impl From<TreeError> for OpError {
    fn from(e: TreeError) -> Self {
        let class = match e {
            TreeError::SchemaMismatch(_) | TreeError::UnknownFeature(_) => Class::Unprocessable,
            _ => Class::BadRequest,
        };
        Self::new(class, e.kind(), e.to_string())
    }
}

impl From<PerceptionError> for OpError {
    fn from(e: PerceptionError) -> Self {
        match e {
            PerceptionError::Dataset(t) => t.into(),
            e => Self::new(Class::BadRequest, e.kind(), e.to_string()),
        }
    }
}

impl From<OrchestratorError> for OpError {
    fn from(e: OrchestratorError) -> Self {
        match e {
            // The record did not fit the model's schema.
            OrchestratorError::Perception(p) => Self::new(Class::Unprocessable, p.kind(), p.to_string()),
            e => Self::new(Class::BadRequest, e.kind(), e.to_string()),
        }
    }
}

impl From<PolicyError> for OpError {
    fn from(e: PolicyError) -> Self {
        Self::new(Class::BadRequest, e.kind(), e.to_string())
    }
}

impl From<BenchError> for OpError {
    fn from(e: BenchError) -> Self {
        Self::new(Class::BadRequest, e.kind(), e.to_string())
    }
}
