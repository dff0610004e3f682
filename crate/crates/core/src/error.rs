use std::io;

use crate::model::{AgentId, DeId, FunctionId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes surfaced by every station operation.
///
/// The service layer maps each variant onto a [`ErrorClass`] so that
/// clients can tell authentication, authorization, validation and
/// internal failures apart.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("authentication failed: {0}")]
    Authentication(String),
    #[error("not authorized: {0}")]
    Unauthorized(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("unknown data element {0}")]
    UnknownDe(DeId),
    #[error("unknown function {0}")]
    UnknownFunction(FunctionId),
    #[error("public key already registered to agent {0}")]
    DuplicatePublicKey(AgentId),
    #[error("duplicate function name {0}")]
    DuplicateFunction(FunctionId),
    #[error("dependency cycle: {}", format_cycle(.0))]
    Cycle(Vec<FunctionId>),
    #[error("manifest rejected: {0}")]
    Manifest(String),
    #[error("symmetric key required for agent {0}")]
    KeyRequired(AgentId),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("station is recovering; awaiting keys from {0:?}")]
    Recovering(Vec<AgentId>),
    #[error("recovery halted: {0}")]
    IntegrityAlarm(String),
    #[error("checkpoint refused: {0}")]
    CheckpointRefused(String),
    #[error("sandbox failure: {0}")]
    Sandbox(String),
    #[error("access violation: {0}")]
    Violation(String),
    #[error("storage: {0}")]
    Io(#[from] io::Error),
    #[error("encoding: {0}")]
    Encoding(String),
    #[error("injected crash")]
    InjectedCrash,
    #[error("station halted after an earlier failure")]
    Poisoned,
    /// A failure reported by a remote station.
    #[error("{message}")]
    Remote { class: ErrorClass, message: String },
}

fn format_cycle(path: &[FunctionId]) -> String {
    path.iter()
        .map(|f| f.as_str())
        .collect::<Vec<_>>()
        .join(" -> ")
}

/// Coarse response-code space shared by the wire protocol and the CLI
/// exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ErrorClass {
    Authentication,
    Authorization,
    Validation,
    NotFound,
    Unavailable,
    Internal,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Authentication => 3,
            ErrorClass::Authorization => 4,
            ErrorClass::Validation => 5,
            ErrorClass::NotFound => 6,
            ErrorClass::Unavailable => 7,
            ErrorClass::Internal => 10,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Authentication(_) | Error::Integrity(_) => ErrorClass::Authentication,
            Error::Unauthorized(_) | Error::Violation(_) => ErrorClass::Authorization,
            Error::Invalid(_)
            | Error::DuplicatePublicKey(_)
            | Error::DuplicateFunction(_)
            | Error::Cycle(_)
            | Error::Manifest(_)
            | Error::CheckpointRefused(_) => ErrorClass::Validation,
            Error::UnknownAgent(_) | Error::UnknownDe(_) | Error::UnknownFunction(_) => {
                ErrorClass::NotFound
            }
            Error::KeyRequired(_) | Error::Recovering(_) => ErrorClass::Unavailable,
            Error::IntegrityAlarm(_)
            | Error::Sandbox(_)
            | Error::Io(_)
            | Error::Encoding(_)
            | Error::InjectedCrash
            | Error::Poisoned => ErrorClass::Internal,
            Error::Remote { class, .. } => *class,
        }
    }
}

impl From<bincode::Error> for Error {
    fn from(e: bincode::Error) -> Self {
        Error::Encoding(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Encoding(e.to_string())
    }
}
