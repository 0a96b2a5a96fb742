use thiserror::Error;

pub type Result<T, E = FlisError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlisError {
    #[error("input shape mismatch: expected {expected} feature columns, got {found}")]
    InputShape { expected: usize, found: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("training diverged: non-finite gradient at step {step}")]
    Diverged { step: usize },
    #[error("invalid value for `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },
    #[error("partition failed: {0}")]
    Partition(String),
    #[error("requested {requested} samples but only {available} are available")]
    Size { requested: usize, available: usize },
    #[error("inference matrix of client {client} has zero Frobenius norm")]
    DegenerateMatrix { client: usize },
    #[error("cannot aggregate: client {client} has no update this round")]
    MissingMember { client: usize },
    #[error("clustering error unavailable: {0}")]
    MetricUnavailable(String),
    #[error("csv import failed: {0}")]
    Csv(String),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<FlisError>,
    },
}

impl FlisError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        FlisError::InvalidArgument { name, reason: reason.into() }
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        match self {
            e @ FlisError::Round { .. } => e,
            e => FlisError::Round { round, source: Box::new(e) },
        }
    }
}
