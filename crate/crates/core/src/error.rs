use thiserror::Error;

/// Errors raised by the estimation, coding, detection and simulation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A user-supplied parameter violates its contract.
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    /// A numerical routine could not proceed (e.g. a singular innovation covariance).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The decoder was asked to reference a time it holds no estimate for.
    #[error("no logged estimate at reference time {time}")]
    MissingLogEntry { time: u64 },

    /// Receipt time must be strictly after the reference time carried in the packet.
    #[error("nonpositive age: receipt time {receipt_time}, reference time {ref_time}")]
    NonPositiveAge { receipt_time: u64, ref_time: u64 },

    /// Both pre- and post-change likelihoods vanish for an observation.
    #[error("observation has zero likelihood under both hypotheses (age {age})")]
    InvalidObservation { age: u64 },

    /// Statistics were requested over an empty set of runs.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// An error raised while simulating, tagged with the step it occurred at.
    #[error("at step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<Error>,
    },

    /// A property that must hold in every run was violated.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("I/O error at {path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn at_step(self, step: u64) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    /// True for errors caused by invalid user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config { .. } => true,
            Error::AtStep { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
