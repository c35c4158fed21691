//! Shared configuration error. Module-specific failures (dataset parsing,
//! training aborts, optimizer diagnostics) have their own enums next to the
//! code that raises them.

use thiserror::Error;

/// Invalid configuration or contract violation caught at build/validate time.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        ConfigError(msg.into())
    }
}
