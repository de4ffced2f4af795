//! Session daemon for the lull nudge engine: tick loop, HTTP control API,
//! event stream and telemetry upload.

use thiserror::Error;

pub mod api;
pub mod config;
pub mod session;
pub mod telemetry;

pub use config::{ConfigError, RunMode, SessionConfig};
pub use session::{run_session, SessionController, SessionOutcome, SessionState, SessionStatus};

/// Process exit codes, one per failure category.
pub mod exit {
    pub const OK: i32 = 0;
    pub const RUNTIME: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const INPUT: i32 = 4;
    pub const SOURCE: i32 = 5;
    pub const IO: i32 = 6;
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Source(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<lull_core::engine::EngineError> for ServiceError {
    fn from(e: lull_core::engine::EngineError) -> Self {
        ServiceError::Config(ConfigError::Invalid(e.to_string()))
    }
}

impl ServiceError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ServiceError::Config(_) => exit::CONFIG,
            ServiceError::Input(_) => exit::INPUT,
            ServiceError::Source(_) => exit::SOURCE,
            ServiceError::Io(_) => exit::IO,
            ServiceError::Runtime(_) => exit::RUNTIME,
        }
    }
}
