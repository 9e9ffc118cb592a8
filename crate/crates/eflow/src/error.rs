use std::fmt;

/// Crate-wide error type. Variants map onto process exit codes in the CLI:
/// config 2, ingestion/format/io 3, numeric family 4, capability 5.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible tensor or batch shapes.
    Dimension(String),
    /// Value outside the mathematical domain of an operation.
    Domain(String),
    /// Too few samples for the requested estimator.
    SampleSize(String),
    /// Singular matrix or covariance.
    Singular(String),
    /// Non-finite values or failed numeric procedure.
    Numeric(String),
    /// API contract violation (wrong op for the given inputs).
    Contract(String),
    /// Operation unsupported by the model architecture.
    Capability(String),
    /// Invalid run configuration.
    Config(String),
    /// Failed to read or parse input data.
    Ingestion(String),
    /// Corrupt or unsupported model file.
    Format(String),
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Ingestion(_) | Error::Format(_) | Error::Io(_) => 3,
            Error::Dimension(_)
            | Error::Domain(_)
            | Error::SampleSize(_)
            | Error::Singular(_)
            | Error::Numeric(_)
            | Error::Contract(_) => 4,
            Error::Capability(_) => 5,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::SampleSize(m) => write!(f, "sample-size error: {m}"),
            Error::Singular(m) => write!(f, "singular-matrix error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Capability(m) => write!(f, "capability error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Ingestion(m) => write!(f, "ingestion error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
