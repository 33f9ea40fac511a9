use thiserror::Error;

/// Failures shared by every module.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid input; `path` names the offending field, e.g. `params.beta`.
    #[error("invalid input at `{path}`: {msg}")]
    Input { path: String, msg: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Two routes to the same quantity disagree.
    #[error("consistency failure: {0}")]
    Consistency(String),

    #[error("method not applicable: {0}")]
    Method(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn input(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Input {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit status used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input { .. } | Error::Precondition(_) | Error::Method(_) => 2,
            Error::Numeric(_) | Error::Consistency(_) => 3,
            Error::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
