//! Crate-wide error type.

use std::fmt;

/// Errors produced by any stage of the pipeline.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration or constructor arguments. Carries every
    /// violation found, not just the first.
    Config(Vec<String>),
    /// Shape mismatch in a numeric primitive; names the primitive and shapes.
    Shape { op: &'static str, detail: String },
    /// NaN or Inf encountered in a numeric primitive.
    NonFinite { op: &'static str },
    /// A loss function evaluated twice at the same point gave different values.
    NonDeterministic { detail: String },
    /// File parse failure; carries the 1-based line number where known.
    Parse { path: String, line: Option<usize>, detail: String },
    /// A required artifact is missing; names the command that produces it.
    MissingArtifact { path: String, produced_by: &'static str },
    Io(std::io::Error),
    /// Anything else: empty pools, out-of-vocabulary ids, single-class AUC...
    Invalid(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// One-word category used by the CLI's machine-parsable error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non-finite",
            Error::NonDeterministic { .. } => "non-deterministic",
            Error::Parse { .. } => "parse",
            Error::MissingArtifact { .. } => "missing-artifact",
            Error::Io(_) => "io",
            Error::Invalid(_) => "invalid",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(violations) => {
                write!(f, "invalid configuration ({} violation(s)): ", violations.len())?;
                write!(f, "{}", violations.join("; "))
            }
            Error::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::NonFinite { op } => write!(f, "non-finite value in {op}"),
            Error::NonDeterministic { detail } => {
                write!(f, "loss function is not deterministic: {detail}")
            }
            Error::Parse { path, line, detail } => match line {
                Some(n) => write!(f, "parse error in {path} at line {n}: {detail}"),
                None => write!(f, "parse error in {path}: {detail}"),
            },
            Error::MissingArtifact { path, produced_by } => {
                write!(f, "missing artifact {path}; run `{produced_by}` first")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Invalid(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
