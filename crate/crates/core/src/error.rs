use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Factor spaces, dimensions or orderings that do not fit together.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("region [{x_lo}, {x_hi}) does not overlap the grid")]
    EmptyRegion { x_lo: f64, x_hi: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An operation was called on input that violates its contract
    /// (e.g. a non-Hermitian operator handed to a Hermitian eigensolver).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure: {message} (condition estimate {condition:.3e})")]
    Numerical { message: String, condition: f64 },

    /// The postselected state is (nearly) orthogonal to the preselected one,
    /// so the conditional weak value diverges.
    #[error("degenerate postselection: |<chi|psi>| = {overlap:.3e} <= floor {floor:.3e}")]
    DegeneratePostselection { overlap: f64, floor: f64 },

    #[error("pointer aliasing: {0}")]
    Aliasing(String),

    #[error("timing error: {0}")]
    Timing(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    /// Process exit code for the command-line driver: 1 validation,
    /// 2 numerical failure, 3 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Serialization(_) => 3,
            Error::Config(_) | Error::Parameter(_) | Error::EmptyRegion { .. } | Error::Structural(_) => 1,
            _ => 2,
        }
    }

    /// Wraps the message with the name of the stage that failed.
    pub fn context(self, what: &str) -> Error {
        match self {
            Error::Structural(m) => Error::Structural(format!("{what}: {m}")),
            Error::Parameter(m) => Error::Parameter(format!("{what}: {m}")),
            Error::Contract(m) => Error::Contract(format!("{what}: {m}")),
            Error::Numerical { message, condition } => Error::Numerical {
                message: format!("{what}: {message}"),
                condition,
            },
            Error::Aliasing(m) => Error::Aliasing(format!("{what}: {m}")),
            Error::Timing(m) => Error::Timing(format!("{what}: {m}")),
            Error::Precondition(m) => Error::Precondition(format!("{what}: {m}")),
            Error::Fit(m) => Error::Fit(format!("{what}: {m}")),
            Error::Config(m) => Error::Config(format!("{what}: {m}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
