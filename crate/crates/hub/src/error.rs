use std::fmt;

use thiserror::Error;

/// One schema violation, located by its field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn list(items: &[String]) -> String {
    items.join(", ")
}

fn report(violations: &[Violation]) -> String {
    violations.iter().map(|v| format!("\n  - {v}")).collect()
}

#[derive(Debug, Error)]
pub enum HubError {
    #[error("metadata is not valid YAML: {0}")]
    Parse(String),
    #[error("metadata has {} violation(s):{}", .0.len(), report(.0))]
    Validation(Vec<Violation>),
    #[error("duplicate entry: id '{id}' with model {model_hash} and config {config_hash} is already indexed")]
    Duplicate { id: String, model_hash: String, config_hash: String },
    #[error("malformed index: {0}")]
    Index(String),
    #[error("no compatible adapter matches '{query}'; nearest ids: {}", list(.nearest))]
    NotFound { query: String, nearest: Vec<String> },
    #[error("'{query}' is ambiguous; candidates: {}", list(.candidates))]
    Ambiguous { query: String, candidates: Vec<String> },
    #[error("digest mismatch for {url}: expected {expected}, got {actual}")]
    Digest { url: String, expected: String, actual: String },
    #[error("transfer of {url} failed: {message}")]
    Transport { url: String, message: String },
    #[error("unsupported url '{0}'")]
    Url(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Package(#[from] adaptkit::Error),
}

impl HubError {
    /// Transport failures may succeed on retry; digest and validation failures will not.
    pub fn is_retriable(&self) -> bool {
        matches!(self, HubError::Transport { .. })
    }
}

pub type Result<T, E = HubError> = std::result::Result<T, E>;
