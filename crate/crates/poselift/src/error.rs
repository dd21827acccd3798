use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not agree with the operation contract.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A numeric result left the finite domain (NaN/inf) or a numeric
    /// precondition failed.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The skeleton topology is malformed (bad edges, mirror pairs, root).
    #[error("topology error: {0}")]
    Topology(String),

    /// Camera projection failed (non-positive depth in pinhole mode).
    #[error("projection error: {0}")]
    Projection(String),

    /// A diffusion step index is out of range or mis-ordered.
    #[error("step error: {0}")]
    Step(String),

    /// An operation contract was violated by the caller (e.g. a matrix
    /// required to be row-stochastic is not).
    #[error("contract error: {0}")]
    Contract(String),

    /// A serialized artifact (pose file, checkpoint, config) is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for user-correctable input problems,
    /// 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Dimension(_)
            | Error::Topology(_)
            | Error::Step(_)
            | Error::Contract(_)
            | Error::Format(_) => 2,
            Error::Numeric(_) | Error::Projection(_) => 3,
            Error::Io(_) => 1,
        }
    }
}
