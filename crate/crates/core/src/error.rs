use thiserror::Error;

pub type Result<T> = std::result::Result<T, FedZooError>;

#[derive(Debug, Error)]
pub enum FedZooError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("{context}: factorization failed after jitter (condition estimate {condition:.3e})")]
    Numerical { context: &'static str, condition: f64 },

    #[error("input outside the normalized domain: coordinate {index} = {value}")]
    OutOfDomain { index: usize, value: f64 },

    #[error("weight vectors were built from different bases (seeds {left} and {right})")]
    BasisMismatch { left: u64, right: u64 },

    #[error("{0} is undefined for a zero vector")]
    Undefined(&'static str),

    #[error("objective evaluation failed: {0}")]
    Objective(String),

    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<FedZooError>,
    },

    #[error("{algorithm}, seed {seed}: {source}")]
    Run {
        algorithm: String,
        seed: u64,
        #[source]
        source: Box<FedZooError>,
    },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("malformed weight vector payload: {0}")]
    Payload(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FedZooError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        FedZooError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        FedZooError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn in_client(self, round: usize, client: usize) -> Self {
        match self {
            e @ FedZooError::Client { .. } => e,
            other => FedZooError::Client {
                round,
                client,
                source: Box::new(other),
            },
        }
    }

    /// True for errors caused by bad configuration rather than a failed run.
    pub fn is_config(&self) -> bool {
        match self {
            FedZooError::Config { .. } | FedZooError::InvalidParameter { .. } => true,
            FedZooError::Run { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(FedZooError::Dimension {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
