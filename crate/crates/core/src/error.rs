use thiserror::Error;

pub type Result<T, E = ArgusError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ArgusError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at coordinate {coordinate}: {what}")]
    Numeric { coordinate: usize, what: String },

    #[error("divergence at iteration {iteration}{}: {what}", agent.map(|a| format!(", agent {a}")).unwrap_or_default())]
    Divergence {
        iteration: usize,
        agent: Option<usize>,
        what: String,
    },

    #[error("agent {agent} has no cached value for peer {peer}")]
    Staleness { agent: usize, peer: usize },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("internal consistency: {0}")]
    Consistency(String),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ArgusError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    /// Process exit code: 1 for validation failures, 2 for numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Numeric { .. } | Self::Divergence { .. } => 2,
            _ => 1,
        }
    }
}
