//! Shared validation plumbing for the configuration types.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};

/// One violated invariant, addressed by its key path (e.g. `guidance.weights`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl ConfigIssue {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigIssue {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Same issue, nested under `prefix`.
    pub fn prefixed(self, prefix: &str) -> Self {
        ConfigIssue {
            key: format!("{prefix}.{}", self.key),
            message: self.message,
        }
    }
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

pub trait Validate {
    /// Every violated invariant; empty when valid.
    fn issues(&self) -> Vec<ConfigIssue>;

    fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            return Ok(());
        }
        let joined = issues
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::InvalidArgument(joined))
    }
}
