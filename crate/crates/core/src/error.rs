use std::path::PathBuf;

use crate::manifest::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("record {record_id} is invalid: {}", join(violations))]
    InvalidRecord {
        record_id: String,
        violations: Vec<Violation>,
    },

    #[error("manifest invariant violated: {0}")]
    Manifest(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("score parse error: {0}")]
    ScoreParse(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("{backend} backend failed after {attempts} attempt(s): {message}")]
    Backend {
        backend: &'static str,
        attempts: u32,
        message: String,
    },

    #[error("{backend} backend violated its contract: {message}")]
    Contract {
        backend: &'static str,
        message: String,
    },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("cannot assemble datasets: {0}")]
    Assemble(String),
}

fn join(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this failure: 2 for backend and configuration
    /// problems, 1 for everything that is wrong with the data itself.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Backend { .. } | Error::Contract { .. } | Error::Config(_) => 2,
            _ => 1,
        }
    }
}
